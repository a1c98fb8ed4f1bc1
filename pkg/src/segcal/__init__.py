"""Calibration and uncertainty tooling for probabilistic segmentation models.

Submodules:

- ``volume``: labelled and probabilistic voxel volumes and the SEGV1 file format
- ``calibration``: NLL, Brier score, ECE and reliability diagrams
- ``segmetrics``: Dice, HD95 and dilated evaluation boxes
- ``ensemble``: probability averaging, MC dropout and the ensemble-size sweep
- ``uncertainty``: segment entropy, logit-Dice correlation and OOD scoring
- ``toynet``: a small numpy segmenter trained with CE or Dice loss
- ``phantoms``: seeded synthetic phantoms with a domain-shift knob
- ``stats``: bootstrap confidence intervals and paired tests
- ``cli``: the ``segcal`` command line
"""

__version__ = "0.1.0"
