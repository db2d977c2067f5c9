"""Pairwise class balance for long-tailed classification.

Modules: ``datagen`` (long-tailed data), ``confmat`` (confusion statistics),
``calib`` (post-hoc calibration), ``losses``, ``head`` (recurrent classifier
head), ``trainer``, ``report``, ``experiment`` (spec files) and ``cli``.
"""

__version__ = "0.1.0"
