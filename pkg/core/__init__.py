# Core package: codec, networks, losses, metrics, training and inference
