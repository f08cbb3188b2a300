"""Configuration, pipeline stages, reports and the command line."""
