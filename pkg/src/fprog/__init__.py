"""Behavioral compiler and pulse-accurate simulator for a field-programmable DNN fabric."""

__version__ = "0.1.0"
