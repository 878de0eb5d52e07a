"""Config-driven experiments: data, optimisation, training loop, CLI."""
