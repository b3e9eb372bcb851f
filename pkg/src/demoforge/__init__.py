"""demoforge: deterministic robot teleoperation demo collection.

A library plus CLI hosting simulated serial-chain robot sessions, streaming
synchronized state to teleoperating clients, ingesting language/video/teleop
demonstrations, and persisting them as temporally aligned episodes that
replay bit for bit.
"""

__version__ = "0.1.0"
