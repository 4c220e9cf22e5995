"""Separate characterization and mitigation of single-qubit SPAM errors.

Submodules:

* :mod:`qspam.qcore` -- density matrices, gates, channels
* :mod:`qspam.spam_model` -- parameter set, Kraus/POVM construction, forward probabilities
* :mod:`qspam.sim` -- shot-level sampler for the characterization circuits and GHZ runs
* :mod:`qspam.estimator` -- closed-form and weighted least-squares parameter recovery
* :mod:`qspam.mitigation` -- SP correction pulses, readout mitigation, bias bounds
* :mod:`qspam.cli` -- campaign runner
"""

__version__ = "0.1.0"
