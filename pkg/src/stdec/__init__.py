""" Spatio-temporal clustering of sensor time series.

Deep embedded clustering (DEC) and its spatially regularised variant, with DTW based
temporal metrics and line-connectivity spatial metrics.
"""

__version__ = "0.1.0"
