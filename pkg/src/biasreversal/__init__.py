"""Bias reversal under selective labels: simulation and verification toolkit."""
