# Companion web UI: Flask templates, static assets and TypeScript sources
