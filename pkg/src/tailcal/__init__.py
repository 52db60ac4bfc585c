"""tailcal: measure the class prior a trained classifier absorbed from
imbalanced data and remove it post hoc, validated against an analytic
Bayes oracle on synthetic long-tailed Gaussian mixtures.
"""

__version__ = "0.1.0"
