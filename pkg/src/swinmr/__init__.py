"""Swin-transformer MRI reconstruction at desk scale.

Submodules: ``tensor`` (autodiff core), ``kspace`` (acquisition simulation),
``model`` (SwinMR network), ``losses``, ``metrics``, ``train``, ``bench``,
``report`` and ``cli``. Kept import-light so the CLI can configure threading
before NumPy loads.
"""

__version__ = "0.1.0"
