"""Table-top tool-use planning simulator: LLM agent roles, multi-view perception,
task-oriented grasping and an experiment harness with partial-success gates."""

__version__ = "0.1.0"
