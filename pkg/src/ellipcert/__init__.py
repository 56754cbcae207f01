"""ellipcert: prove open-loop stability of controller code by synthesizing
ellipsoidal loop invariants and emitting independently checkable certificates."""

__version__ = "0.1.0"

from . import certificate, cli, config, ellipsoid, frontend, roles, semantics, simulate, synthesis  # noqa: F401,E501
