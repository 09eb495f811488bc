"""Maze navigation with a readable 2D map: world, localizer, planner, agent."""

__version__ = "0.1.0"
