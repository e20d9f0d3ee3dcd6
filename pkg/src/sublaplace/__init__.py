"""Subnetwork linearized-Laplace inference for small fully connected networks.

Pipeline: train a MAP estimate (:mod:`sublaplace.train`), score and select a
weight subnetwork (:mod:`sublaplace.select`), build a full-covariance
Gaussian posterior over it (:mod:`sublaplace.laplace`), and form closed-form
linearized predictive distributions (:mod:`sublaplace.predict`). Metrics and
experiment protocols live in :mod:`sublaplace.evaluate`; the :mod:`sublaplace.cli`
module exposes everything as a command-line pipeline.
"""

__version__ = "0.1.0"
