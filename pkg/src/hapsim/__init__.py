"""Warehouse fleet simulation with human-aware planning.

The package is organized around the data flow of a robotized warehouse
that human workers share with the robot fleet:

- ``graph``: warehouse layout, road-distance matrix, shortest paths.
- ``intention``: deviation detection and goal-belief tracking for humans.
- ``planner``: time-window reservation planner for the robot fleet.
- ``human_aware``: human-precedence planning and reactions to deviations.
- ``sim``: deterministic fixed-timestep world with metrics and replay logs.
- ``scenario`` / ``cli`` / ``bridge``: configuration files, command line,
  and the live streaming/steering service.
"""

__version__ = "0.1.0"
