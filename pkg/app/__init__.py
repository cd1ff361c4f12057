"""marketdyn - collective dynamics of financial price panels"""

__version__ = "1.0.0"
