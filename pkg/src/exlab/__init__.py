"""Monte Carlo and semi-analytic laboratory for excursion/level set component
counts of smooth stationary Gaussian fields."""

__version__ = "0.1.0"
