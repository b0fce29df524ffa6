"""Bottom-up clustering of hierarchical time series with Soft-DTW and Wasserstein
distances, and cluster-accelerated coherent forecasting."""

__version__ = "0.3.0"
