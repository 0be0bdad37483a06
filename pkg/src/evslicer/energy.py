"""Theoretical energy model for the slicing network.

Spiking layers mostly see binary inputs, so a synapse only works when its
input is 1: operation count per layer is SOPs = fr * T * FLOPs, where fr is
the mean value of the layer's input over the profiling run (equal to the
spike density for binary inputs — mean pooling preserves it), T the number
of timesteps, and FLOPs the layer's multiply-accumulate count. The first
convolution reads analog count grids, so it is billed once at full
multiply-accumulate cost with no timestep factor; all later convolutions
and all fully connected layers are billed per accumulate on SOPs:

    E = E_MAC * FLOPs(first conv) + E_AC * sum(SOPs(other conv and FC))

Constants assume a 45 nm process: E_MAC = 4.6 pJ, E_AC = 0.9 pJ.
Normalization and pooling layers are excluded from the count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .snn import ConvLayer, LinearLayer

__all__ = [
    "E_MAC_JOULES", "E_AC_JOULES", "LayerStats", "synaptic_ops",
    "conv_flops", "fc_flops", "profile_network", "energy_joules",
    "energy_report",
]

E_MAC_JOULES = 4.6e-12
E_AC_JOULES = 0.9e-12


@dataclass
class LayerStats:
    """One billed layer: its MAC count, input spike density, and timesteps."""

    name: str
    kind: str            # "conv" | "fc"
    flops: int
    fr: float            # mean input value over the profiling run, in [0, 1]
    t: int               # timesteps the layer ran

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"layer kind must be conv or fc, got {self.kind!r}")
        if self.flops < 0:
            raise ValueError(f"negative FLOPs {self.flops}")
        if not 0.0 <= self.fr <= 1.0:
            raise ValueError(f"firing rate {self.fr} outside [0, 1]")
        if self.t < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.t}")


def synaptic_ops(stats):
    """SOPs = fr * T * FLOPs."""
    return stats.fr * stats.t * stats.flops


def conv_flops(cin, cout, k, oh, ow):
    """Multiply-accumulate count of one convolution forward pass."""
    return cout * cin * k * k * oh * ow


def fc_flops(in_features, out_features):
    return in_features * out_features


def profile_network(net, cells):
    """Forward a profiling cell sequence and capture per-layer LayerStats.

    fr of each billed layer is the mean value of its input tensor across
    all timesteps. The first billed layer reads analog count grids rather
    than spikes; it is billed timestep-free at MAC cost, so its fr is fixed
    at 1.0 by convention (every synapse active).
    """
    grids = cells.grids if hasattr(cells, "grids") else np.asarray(cells)
    t_steps = grids.shape[0]
    if t_steps < 1:
        raise ValueError("profiling needs at least one cell")
    billed = [(i, layer) for i, layer in enumerate(net.layers)
              if isinstance(layer, (ConvLayer, LinearLayer))]
    sums = {i: 0.0 for i, _ in billed}
    net.reset_state()
    with ad.no_grad():
        for n in range(t_steps):
            x = Tensor(grids[n][None] * net.input_scale)
            for i, layer in enumerate(net.layers):
                if i in sums:
                    sums[i] += float(x.data.mean())
                x = layer(x)
    net.reset_state()
    stats = []
    for pos, (i, layer) in enumerate(billed):
        in_shape, out_shape = net.layer_shapes[i]
        if isinstance(layer, ConvLayer):
            cout, cin, kh, kw = layer.weight.data.shape
            flops = conv_flops(cin, cout, kh, out_shape[1], out_shape[2])
            kind = "conv"
        else:
            flops = fc_flops(in_shape[0], out_shape[0])
            kind = "fc"
        fr = 1.0 if pos == 0 else sums[i] / t_steps
        stats.append(LayerStats(name=layer.name, kind=kind, flops=flops,
                                fr=fr, t=t_steps))
    return stats


def _billing(stats_list):
    """Pair each LayerStats with its billing rule ("mac" | "ac")."""
    first_conv = next((i for i, s in enumerate(stats_list) if s.kind == "conv"), None)
    return [(s, "mac" if i == first_conv else "ac") for i, s in enumerate(stats_list)]


def energy_joules(stats_list):
    """Total energy of one forward run under the two-rate billing rule."""
    total = 0.0
    for stats, rule in _billing(stats_list):
        if rule == "mac":
            total += E_MAC_JOULES * stats.flops
        else:
            total += E_AC_JOULES * synaptic_ops(stats)
    return total


def energy_report(stats_list):
    """JSON-ready report: per-layer rows plus totals and the constants."""
    layers = []
    total_flops = 0
    total_sops = 0.0
    total_joules = 0.0
    for stats, rule in _billing(stats_list):
        sops = synaptic_ops(stats)
        joules = E_MAC_JOULES * stats.flops if rule == "mac" else E_AC_JOULES * sops
        layers.append({
            "name": stats.name, "kind": stats.kind, "billing": rule,
            "flops": stats.flops, "fr": stats.fr, "t": stats.t,
            "sops": sops, "joules": joules,
        })
        total_flops += stats.flops
        total_sops += sops
        total_joules += joules
    return {
        "constants": {"e_mac_joules": E_MAC_JOULES, "e_ac_joules": E_AC_JOULES},
        "layers": layers,
        "totals": {"flops": total_flops, "sops": total_sops, "joules": total_joules},
    }
