"""Package initialisation for the AFIU defocus blur detection toolkit.

This package contains the AFIU segmentation network (``blocks.py`` and
``network.py``), corpus loading and synthetic data (``data.py``), the
two-stage transfer training procedure (``training.py``), the F-measure /
MAE evaluation protocol (``metrics.py``) and on-disk formats
(``store.py``).  Refer to ``app.py`` for the command-line entry points.
"""
