"""Vision Transformer inference with activation taps, register-neuron
discovery and training-free test-time register interventions."""

__version__ = "0.1.0"
