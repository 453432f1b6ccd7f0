"""Mixed-strategy adversarial training at desk scale.

Submodules: ``autodiff`` (reverse-mode tape), ``losses`` (task loss and
output-deviation regularizer), ``game`` (entropy mirror descent on matrix
games), ``samplers`` (SGLD and preconditioned variants), ``models`` and
``data`` (embedding MLPs and datasets), ``trainer`` (MAT and baselines) and
``harness``/``cli`` (the ``mixat`` command).
"""

__version__ = "0.1.0"
