"""Analytical FPGA global placer with per-resource electrostatic spreading."""

from .arch import (
    Device,
    FieldKind,
    GenSpec,
    InstKind,
    Instance,
    InfeasibleError,
    Net,
    Netlist,
    ParseError,
    SiteKind,
    generate_synthetic,
    parse_device,
    parse_netlist,
    serialize_device,
    serialize_netlist,
)

__all__ = [
    "Device", "FieldKind", "GenSpec", "InstKind", "Instance", "InfeasibleError",
    "Net", "Netlist", "ParseError", "SiteKind", "generate_synthetic",
    "parse_device", "parse_netlist", "serialize_device", "serialize_netlist",
]

__version__ = "0.1.0"
