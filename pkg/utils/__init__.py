# Utilities package: logging, monitoring and image payloads
