"""HTTP service wrapping the matching pipeline; the CLI is a thin client
of the same job functions."""
