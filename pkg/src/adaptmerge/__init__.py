"""Class-incremental learning with per-task adapters merged by running mean."""
