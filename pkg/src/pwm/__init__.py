"""Policy learning through pre-trained differentiable world models."""
