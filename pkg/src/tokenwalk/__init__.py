"""Token algorithms for decentralized optimization."""
