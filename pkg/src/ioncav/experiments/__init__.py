"""Config-driven experiment runner, golden-file comparison and CLI."""
