"""Edge-device / server offload simulation for the early-exit network.

Each query carries its own compute budget (in multiply-accumulates).
The device runs exits as deep as both the budget and its own per-query
compute cap allow, answering early when an exit's confidence clears the
calibrated threshold. When the device cap is what stops it — the budget
would allow going deeper — the device ships the current block-boundary
features to the server, which resumes from that block. A device that
cannot even run the first exit ships the raw curve instead. When the
*budget* is what stops it, the query is answered on the device with the
deepest exit computed (a budget below the first exit's cost still
answers at exit 1, flagged over budget).

Feature payloads are framed with a magic string, a little-endian header
and a CRC-32 trailer; a corrupted payload is retransmitted once.
"""

from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .dataset import SpectralCurve
from .network import ScaiModel, iter_exit_stages, static_cost_table
from .tensor import no_grad

FEATURE_MAGIC = b"SCAI-FEAT-1\n"
_HEADER = struct.Struct("<III")
_CRC = struct.Struct("<I")


class ChecksumError(ValueError):
    """Feature payload failed CRC or framing validation."""


@dataclass
class DeviceProfile:
    """Rates are multiply-accumulates per second; uplink is bytes per second."""

    device_rate: float
    max_device_flops: float
    uplink_bytes_per_s: float
    rtt_s: float
    server_rate: float

    def validate(self) -> None:
        if self.device_rate <= 0 or self.server_rate <= 0:
            raise ValueError("compute rates must be positive")
        if self.uplink_bytes_per_s <= 0:
            raise ValueError("uplink rate must be positive")
        if self.rtt_s < 0 or self.max_device_flops < 0:
            raise ValueError("rtt and device cap must be non-negative")


@dataclass
class BudgetModel:
    """Per-query budget draw: 'fixed', 'uniform' or 'exponential'."""

    kind: str
    value: float = 0.0
    low: float = 0.0
    high: float = 0.0
    mean: float = 0.0

    def validate(self) -> None:
        if self.kind == "fixed":
            if self.value <= 0:
                raise ValueError("fixed budget must be positive")
        elif self.kind == "uniform":
            if not 0 < self.low <= self.high:
                raise ValueError(f"bad uniform range [{self.low}, {self.high}]")
        elif self.kind == "exponential":
            if self.mean <= 0:
                raise ValueError("exponential mean must be positive")
        else:
            raise ValueError(f"unknown budget kind {self.kind!r}")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return float(self.value)
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        return float(rng.exponential(self.mean))


@dataclass
class SimResult:
    sample_id: str
    label_true: int
    label_pred: int
    exit_index: int
    budget: float
    confidence: float
    device_flops: int
    server_flops: int
    split_block: int  # -1 when not offloaded; 0 means raw input was shipped
    bytes_sent: int
    retransmits: int
    latency_s: float
    over_budget: bool

    @property
    def offloaded(self) -> bool:
        return self.split_block >= 0

    @property
    def correct(self) -> bool:
        return self.label_pred == self.label_true


# -- feature framing ---------------------------------------------------------


def serialize_features(features: np.ndarray, split_block: int) -> bytes:
    """Frame [channels, width] float64 features (or a [1, W] raw curve)."""
    arr = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D [channels, width], got rank {arr.ndim}")
    if split_block < 0:
        raise ValueError(f"split_block must be >= 0, got {split_block}")
    header = _HEADER.pack(split_block, arr.shape[0], arr.shape[1])
    body = arr.astype("<f8").tobytes()
    payload = FEATURE_MAGIC + header + body
    return payload + _CRC.pack(zlib.crc32(payload))


def deserialize_features(payload: bytes) -> tuple[int, np.ndarray]:
    """Validate framing + CRC and return (split_block, features)."""
    base = len(FEATURE_MAGIC) + _HEADER.size
    if len(payload) < base + _CRC.size:
        raise ChecksumError(f"payload truncated at {len(payload)} bytes")
    if not payload.startswith(FEATURE_MAGIC):
        raise ChecksumError("bad magic string")
    (crc,) = _CRC.unpack(payload[-_CRC.size:])
    if zlib.crc32(payload[:-_CRC.size]) != crc:
        raise ChecksumError("CRC mismatch")
    split, channels, width = _HEADER.unpack(payload[len(FEATURE_MAGIC):base])
    body = payload[base:-_CRC.size]
    if len(body) != channels * width * 8:
        raise ChecksumError(
            f"body holds {len(body)} bytes, header promises {channels}x{width} float64")
    arr = np.frombuffer(body, dtype="<f8").reshape(channels, width).astype(np.float64)
    return split, arr


# -- per-query policy --------------------------------------------------------


def _deepest_affordable(costs: np.ndarray, limit: float) -> int:
    """Deepest 1-based exit whose static cost fits, 0 if none does."""
    depth = 0
    for i, c in enumerate(costs):
        if c <= limit:
            depth = i + 1
    return depth


def _server_pass(model: ScaiModel, payload: bytes, thresholds: Sequence[float],
                 server_depth: int) -> tuple[np.ndarray, int, int, int]:
    """Resume on the server; returns (probs, exit_index, server_flops, split)."""
    split, arr = deserialize_features(payload)
    if split == 0:
        stages = iter_exit_stages(model, arr[0])
    else:
        stages = iter_exit_stages(model, None, start_block=split, features=arr)
    last = None
    for stage in stages:
        last = stage
        conf = float(stage.probs.data.max())
        if conf >= thresholds[stage.exit_index - 1] or stage.exit_index >= server_depth:
            break
    return np.copy(last.probs.data), last.exit_index, last.flops, split


def run_query(model: ScaiModel, curve: SpectralCurve, budget: float,
              profile: DeviceProfile, thresholds: Sequence[float],
              costs: np.ndarray,
              transport: Callable[[bytes], bytes] | None = None) -> SimResult:
    exits = model.config.blocks
    if len(thresholds) != exits:
        raise ValueError(f"{len(thresholds)} thresholds for {exits} exits")
    dev_cap = min(budget, profile.max_device_flops)
    dev_depth = _deepest_affordable(costs, dev_cap)
    over_budget = bool(budget < costs[0])

    device_flops = 0
    server_flops = 0
    split_block = -1
    bytes_sent = 0
    retransmits = 0
    payload = None
    probs = None
    exit_index = 0

    with no_grad():
        if dev_depth == 0 and profile.max_device_flops >= costs[0]:
            # The budget, not the device, blocks exit 1: answer there anyway.
            stage = next(iter(iter_exit_stages(model, curve.values)))
            probs, exit_index, device_flops = np.copy(stage.probs.data), 1, stage.flops
        elif dev_depth == 0:
            # Device too weak for exit 1: ship the raw curve.
            payload = serialize_features(curve.values[None, :], 0)
            split_block = 0
        else:
            last = None
            for stage in iter_exit_stages(model, curve.values):
                last = stage
                conf = float(stage.probs.data.max())
                if conf >= thresholds[stage.exit_index - 1]:
                    probs, exit_index = np.copy(stage.probs.data), stage.exit_index
                    break
                if stage.exit_index >= dev_depth:
                    break
            device_flops = last.flops
            if probs is None:
                if dev_depth == exits or costs[dev_depth] > budget:
                    # Budget (or the architecture) stops here: answer locally.
                    probs, exit_index = np.copy(last.probs.data), last.exit_index
                else:
                    # Device cap binds while the budget allows deeper: offload.
                    payload = serialize_features(last.features.data, dev_depth)
                    split_block = dev_depth

        if payload is not None:
            bytes_sent = len(payload)
            server_depth = max(_deepest_affordable(costs, budget), 1)
            wire = transport(payload) if transport is not None else payload
            try:
                probs, exit_index, server_flops, _ = _server_pass(
                    model, wire, thresholds, server_depth)
            except ChecksumError:
                retransmits = 1
                bytes_sent += len(payload)
                probs, exit_index, server_flops, _ = _server_pass(
                    model, payload, thresholds, server_depth)

    latency = device_flops / profile.device_rate
    if split_block >= 0:
        latency += bytes_sent / profile.uplink_bytes_per_s
        latency += (1 + retransmits) * profile.rtt_s
        latency += server_flops / profile.server_rate

    return SimResult(
        sample_id=curve.sample_id,
        label_true=curve.label,
        label_pred=int(np.argmax(probs)),
        exit_index=exit_index,
        budget=float(budget),
        confidence=float(probs.max()),
        device_flops=device_flops,
        server_flops=server_flops,
        split_block=split_block,
        bytes_sent=bytes_sent,
        retransmits=retransmits,
        latency_s=latency,
        over_budget=over_budget,
    )


def simulate(model: ScaiModel, curves: Sequence[SpectralCurve],
             profile: DeviceProfile, budgets: BudgetModel,
             thresholds: Sequence[float], seed: int = 0,
             transport: Callable[[bytes], bytes] | None = None) -> list[SimResult]:
    """Run every curve as one query with an independently drawn budget."""
    profile.validate()
    budgets.validate()
    costs = static_cost_table(model.config)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4]))
    results = []
    for curve in curves:
        budget = budgets.sample(rng)
        results.append(run_query(model, curve, budget, profile, thresholds,
                                 costs, transport=transport))
    return results


def latency_report(results: Sequence[SimResult], exits: int) -> dict:
    if not results:
        raise ValueError("no simulation results to report on")
    latencies = np.array([r.latency_s for r in results])
    histogram = [0] * exits
    for r in results:
        histogram[r.exit_index - 1] += 1
    n = len(results)
    return {
        "queries": n,
        "accuracy": sum(r.correct for r in results) / n,
        "mean_latency_s": float(latencies.mean()),
        "p95_latency_s": float(np.percentile(latencies, 95)),
        "offload_fraction": sum(r.offloaded for r in results) / n,
        "over_budget_fraction": sum(r.over_budget for r in results) / n,
        "mean_device_flops": float(np.mean([r.device_flops for r in results])),
        "mean_server_flops": float(np.mean([r.server_flops for r in results])),
        "mean_bytes_sent": float(np.mean([r.bytes_sent for r in results])),
        "retransmits": int(sum(r.retransmits for r in results)),
        "exit_histogram": histogram,
    }


def write_sim_csv(results: Sequence[SimResult], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "label_true", "label_pred", "exit_index",
                         "budget", "confidence", "device_flops", "server_flops",
                         "split_block", "bytes_sent", "retransmits", "latency_s",
                         "over_budget", "correct"])
        for r in results:
            writer.writerow([r.sample_id, r.label_true, r.label_pred, r.exit_index,
                             repr(r.budget), repr(r.confidence), r.device_flops,
                             r.server_flops, r.split_block, r.bytes_sent,
                             r.retransmits, repr(r.latency_s),
                             int(r.over_budget), int(r.correct)])


# -- scenario files ----------------------------------------------------------


def save_scenario(profile: DeviceProfile, budgets: BudgetModel, seed: int,
                  path: str) -> None:
    payload = {"device": asdict(profile), "budget": asdict(budgets), "seed": int(seed)}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scenario(path: str) -> tuple[DeviceProfile, BudgetModel, int]:
    with open(path) as fh:
        payload = json.load(fh)
    profile = DeviceProfile(**payload["device"])
    budgets = BudgetModel(**payload["budget"])
    profile.validate()
    budgets.validate()
    return profile, budgets, int(payload.get("seed", 0))
