"""xbiscan: cross-browser inconsistency scanner.

Captures timed screenshot bursts of the same URL in two browsers, composites
them into overlays that ghost dynamic content, and runs a staged
vision-language-model analysis (advertisements, dynamic elements, then
cross-browser inconsistencies with impact scores). Ships an offline fixture
corpus and an evaluation harness for scoring runs against ground truth.
"""

__version__ = "0.1.0"
