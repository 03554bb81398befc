"""Training with recorded minibatch updates and amnesiac / partial-update unlearning."""

__version__ = "0.1.0"
