# Configuration package for the deblocking service and trainer
