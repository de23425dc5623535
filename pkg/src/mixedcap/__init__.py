"""Mixed-autonomy road capacity: lane assignment bounds and a phased reordering simulator."""

__version__ = "0.1.0"
