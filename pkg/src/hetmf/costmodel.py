"""Offline cost-model calibration and the workload-split solver.

Both worker classes are microbenchmarked on nested prefix workloads of a
shuffled rating set.  Batch-worker timings are fitted with two-regime
curves: below the plateau size the *speed* (elements/second) follows
a1*g(size)+b1 with g = sqrt(ln size) for transfers and g = ln size for the
compute kernel; at and above it the *elapsed time* is linear a2*size+b2.
Stream workers get a single linear time fit, since their throughput is
insensitive to workload size.

The split solver balances the two per-device costs by bisection on the
(monotone) difference of side costs, with a grid-scan fallback if a noisy
profile makes the difference non-monotone.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

FAMILY_SQRT_LOG = "sqrt-log"
FAMILY_LOG = "log"
FAMILY_LINEAR = "linear"
PROFILE_HEADER = "hmf-profile v1"

# Plateau detection: consecutive speed variation below this fraction means
# the curve has stabilized.
PLATEAU_VARIATION = 0.02


class CostModelError(ValueError):
    """Degenerate fit or unusable model evaluation."""


class NotCalibratedError(FileNotFoundError):
    """No stored calibration profile was found."""


@dataclass
class CalibrationSample:
    size: int          # workload size in elements
    elapsed: float     # seconds, mean over repeats

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("sample size must be positive")
        if self.elapsed <= 0:
            raise ValueError("sample elapsed time must be positive")

    @property
    def speed(self) -> float:
        return self.size / self.elapsed


def _growth(family: str, size) -> np.ndarray:
    size = np.asarray(size, dtype=np.float64)
    if family == FAMILY_SQRT_LOG:
        return np.sqrt(np.log(size))
    if family == FAMILY_LOG:
        return np.log(size)
    raise CostModelError(f"unknown speed family {family!r}")


@dataclass
class PiecewiseCostModel:
    """Two-regime cost curve, evaluated as seconds per workload size.

    family 'linear' ignores the speed regime entirely (a1/b1/plateau unused).
    `floor` is the smallest size the speed regime was fitted on; below it
    the speed is held constant at its floor value, since extrapolating the
    growth curve toward zero can cross into negative speeds.
    """

    family: str
    a1: float = 0.0
    b1: float = 0.0
    plateau: int = 0
    a2: float = 0.0
    b2: float = 0.0
    floor: int = 0

    def speed_at(self, size) -> float:
        return self.a1 * float(_growth(self.family, size)) + self.b1

    def eval(self, size) -> float:
        """Predicted seconds for a workload of `size` elements."""
        if size <= 0:
            raise CostModelError("size must be positive")
        if self.family != FAMILY_LINEAR and size <= self.plateau:
            speed = self.speed_at(max(size, self.floor))
            if speed <= 0:
                raise CostModelError(
                    f"nonpositive predicted speed at size {size}; refit or fall"
                    " back to a linear model")
            return size / speed
        return self.a2 * size + self.b2

    def to_items(self):
        return [("family", self.family), ("a1", self.a1), ("b1", self.b1),
                ("plateau", self.plateau), ("a2", self.a2), ("b2", self.b2),
                ("floor", self.floor)]


@dataclass
class DeviceTopology:
    n_stream: int
    n_batch: int

    def __post_init__(self):
        if self.n_stream < 0 or self.n_batch < 0:
            raise ValueError("worker counts must be >= 0")
        if self.n_stream + self.n_batch < 1:
            raise ValueError("need at least one worker")


@dataclass
class CalibrationProfile:
    stream: PiecewiseCostModel
    transfer_in: PiecewiseCostModel
    transfer_out: PiecewiseCostModel
    kernel: PiecewiseCostModel
    fingerprint: dict = field(default_factory=dict)
    stale: bool = False


def make_prefixes(matrix, segments: int):
    """Nested prefix workloads of sizes (1/N ... N/N) * nnz.

    The matrix must already be shuffled; each workload is a prefix of the
    stored triple order, so workload i is contained in workload i+1.
    """
    if segments < 2:
        raise ValueError("need at least 2 segments")
    if matrix.nnz < segments:
        raise ValueError(f"matrix has {matrix.nnz} triples, fewer than "
                         f"{segments} segments")
    return [(i * matrix.nnz) // segments for i in range(1, segments + 1)]


def detect_threshold(samples) -> int:
    """Smallest sample size after which consecutive speed steps all stay
    below the 2% variation bound.  Falls back to the largest size when the
    curve never settles."""
    if len(samples) < 4:
        raise ValueError("need at least 4 samples to locate a plateau")
    sizes = [s.size for s in samples]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sample sizes must be strictly ascending")
    speeds = [s.speed for s in samples]
    n = len(samples)
    for i in range(n):
        settled = True
        for j in range(i, n - 1):
            if abs(speeds[j + 1] - speeds[j]) / speeds[j] >= PLATEAU_VARIATION:
                settled = False
                break
        if settled:
            return sizes[i]
    return sizes[-1]


def fit_pre_threshold(samples, family: str):
    """Least-squares fit of speed = a1 * g(size) + b1 on the given samples.

    g is sqrt(ln size) for the sqrt-log family and ln size for the log
    family (natural log in both)."""
    if len(samples) < 2:
        raise CostModelError("need at least 2 samples below the plateau")
    x = _growth(family, [s.size for s in samples])
    y = np.array([s.speed for s in samples])
    if np.ptp(x) == 0:
        raise CostModelError("all sample sizes equal; fit is singular")
    a1, b1 = np.polyfit(x, y, 1)
    return float(a1), float(b1)


def fit_linear(samples):
    """Least-squares fit of elapsed = a2 * size + b2."""
    if len(samples) < 2:
        raise CostModelError("need at least 2 samples for the linear fit")
    x = np.array([float(s.size) for s in samples])
    y = np.array([s.elapsed for s in samples])
    if np.ptp(x) == 0:
        raise CostModelError("all sample sizes equal; fit is singular")
    a2, b2 = np.polyfit(x, y, 1)
    return float(a2), float(b2)


def fit_piecewise(samples, family: str) -> PiecewiseCostModel:
    """Locate the plateau and fit both regimes.

    Degenerate splits are handled: a plateau at the smallest size collapses
    to a pure linear model, and a curve that never settles is fitted with
    the speed family everywhere plus a continuous linear extension beyond
    the largest sample.
    """
    plateau = detect_threshold(samples)
    pre = [s for s in samples if s.size <= plateau]
    post = [s for s in samples if s.size >= plateau]
    if len(pre) < 2:
        a2, b2 = fit_linear(samples)
        return PiecewiseCostModel(family=FAMILY_LINEAR, a2=a2, b2=b2)
    a1, b1 = fit_pre_threshold(pre, family)
    floor = int(pre[0].size)
    if any(a1 * float(_growth(family, s.size)) + b1 <= 0 for s in pre):
        # the fitted speed curve dips non-positive inside its own sample
        # range; the shape is not supported by the data
        a2, b2 = fit_linear(samples)
        return PiecewiseCostModel(family=FAMILY_LINEAR, a2=a2, b2=b2)
    if len(post) < 2:
        # Never settled: extend the speed curve linearly from the last point.
        end = pre[-1]
        speed_end = a1 * float(_growth(family, end.size)) + b1
        if speed_end <= 0:
            a2, b2 = fit_linear(samples)
            return PiecewiseCostModel(family=FAMILY_LINEAR, a2=a2, b2=b2)
        a2 = 1.0 / speed_end
        b2 = end.size / speed_end - a2 * end.size
    else:
        a2, b2 = fit_linear(post)
    model = PiecewiseCostModel(family=family, a1=a1, b1=b1,
                               plateau=int(plateau), a2=a2, b2=b2, floor=floor)
    try:
        lo = model.eval(plateau)
        hi = model.a2 * plateau + model.b2
        mid = max(abs(lo), 1e-12)
        if abs(hi - lo) / mid > 0.5:
            # Branches disagree badly at the joint; the two-regime shape is
            # not supported by the data, keep the simpler linear model.
            a2, b2 = fit_linear(samples)
            return PiecewiseCostModel(family=FAMILY_LINEAR, a2=a2, b2=b2)
    except CostModelError:
        a2, b2 = fit_linear(samples)
        return PiecewiseCostModel(family=FAMILY_LINEAR, a2=a2, b2=b2)
    return model


def batch_total_cost(profile: CalibrationProfile, size) -> float:
    """Steady-state batch cost: the slowest of the three pipelined stages.

    Stage-out is normally dominated, but all three are evaluated and the
    maximum taken."""
    return max(profile.transfer_in.eval(size),
               profile.kernel.eval(size),
               profile.transfer_out.eval(size))


def stream_cost(profile: CalibrationProfile, size) -> float:
    return profile.stream.eval(size)


def predicted_makespan(profile: CalibrationProfile, topology: DeviceTopology,
                       total_size: int, alpha: float) -> float:
    """max(batch side / n_batch, stream side / n_stream) at a given split."""
    batch_size = alpha * total_size
    stream_size = (1.0 - alpha) * total_size
    sides = []
    if topology.n_batch > 0:
        sides.append((batch_total_cost(profile, batch_size) if batch_size > 0 else 0.0)
                     / topology.n_batch)
    if topology.n_stream > 0:
        sides.append((stream_cost(profile, stream_size) if stream_size > 0 else 0.0)
                     / topology.n_stream)
    return max(sides)


def solve_alpha(profile: CalibrationProfile, topology: DeviceTopology,
                total_size: int, tol: float = 0.005) -> float:
    """Workload fraction for the batch side that balances per-device costs.

    Bisection on d(a) = batch_cost(a*S)/n_batch - stream_cost((1-a)*S)/n_stream,
    which is increasing when both cost curves are monotone.  Stops when the
    two sides differ by at most `tol` of their mean, or the bracket is
    narrower than 1e-4.  Non-monotone differences (corrupt or noisy
    profiles) fall back to a 1000-point grid scan.
    """
    if topology.n_batch == 0:
        return 0.0
    if topology.n_stream == 0:
        return 1.0

    def diff(a: float) -> float:
        batch = batch_total_cost(profile, a * total_size) if a > 0 else 0.0
        stream = stream_cost(profile, (1 - a) * total_size) if a < 1 else 0.0
        return batch / topology.n_batch - stream / topology.n_stream

    def balanced(a: float) -> bool:
        batch = batch_total_cost(profile, a * total_size) if a > 0 else 0.0
        stream = stream_cost(profile, (1 - a) * total_size) if a < 1 else 0.0
        mean = 0.5 * (batch / topology.n_batch + stream / topology.n_stream)
        if mean <= 0:
            return True
        return abs(batch / topology.n_batch - stream / topology.n_stream) <= tol * mean

    try:
        probes = np.linspace(0.0, 1.0, 17)
        values = [diff(a) for a in probes]
        if any(b < a - 1e-12 for a, b in zip(values, values[1:])):
            raise CostModelError("difference function is not monotone")
        lo, hi = 0.0, 1.0
        if values[0] >= 0:
            return 0.0
        if values[-1] <= 0:
            return 1.0
        while hi - lo > 1e-4:
            mid = 0.5 * (lo + hi)
            if balanced(mid):
                return mid
            if diff(mid) < 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)
    except CostModelError:
        grid = np.linspace(1e-4, 1.0 - 1e-4, 1000)
        scores = [abs(diff(a)) for a in grid]
        return float(grid[int(np.argmin(scores))])


def _format_value(value):
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_profile(path, profile: CalibrationProfile) -> None:
    lines = [PROFILE_HEADER, "# calibration profile"]
    for name, model in (("stream", profile.stream),
                        ("batch.transfer_in", profile.transfer_in),
                        ("batch.transfer_out", profile.transfer_out),
                        ("batch.kernel", profile.kernel)):
        for key, value in model.to_items():
            lines.append(f"{name}.{key} = {_format_value(value)}")
    for key in sorted(profile.fingerprint):
        lines.append(f"fingerprint.{key} = {_format_value(profile.fingerprint[key])}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_number(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def load_profile(path, topology: DeviceTopology | None = None) -> CalibrationProfile:
    """Read a stored profile; flags it stale when the fingerprint does not
    match the current topology (still usable)."""
    if not os.path.exists(path):
        raise NotCalibratedError(f"no calibration profile at {path}; run calibrate first")
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != PROFILE_HEADER:
            raise CostModelError(f"{path}: unsupported profile header {header!r}")
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()

    def model_from(prefix: str) -> PiecewiseCostModel:
        return PiecewiseCostModel(
            family=entries[f"{prefix}.family"],
            a1=float(entries.get(f"{prefix}.a1", 0.0)),
            b1=float(entries.get(f"{prefix}.b1", 0.0)),
            plateau=int(entries.get(f"{prefix}.plateau", 0)),
            a2=float(entries.get(f"{prefix}.a2", 0.0)),
            b2=float(entries.get(f"{prefix}.b2", 0.0)),
            floor=int(entries.get(f"{prefix}.floor", 0)),
        )

    fingerprint = {}
    for key, value in entries.items():
        if key.startswith("fingerprint."):
            fingerprint[key[len("fingerprint."):]] = _parse_number(value)
    profile = CalibrationProfile(
        stream=model_from("stream"),
        transfer_in=model_from("batch.transfer_in"),
        transfer_out=model_from("batch.transfer_out"),
        kernel=model_from("batch.kernel"),
        fingerprint=fingerprint,
    )
    if topology is not None:
        if (fingerprint.get("n_stream") != topology.n_stream
                or fingerprint.get("n_batch") != topology.n_batch):
            profile.stale = True
    return profile


def measure_worker(worker_class: str, prefixes, repeats: int, *, grid_matrix,
                   hparams, batch_config=None, seed: int = 0):
    """Time one worker class on each prefix workload.

    Runs each measurement `repeats` times on throwaway factor matrices and
    records the mean.  Stream workers yield a list of CalibrationSample;
    batch workers yield a dict with 'transfer_in', 'kernel' and
    'transfer_out' sample series (the three pipeline stages are timed
    separately).
    """
    from . import workers as _workers  # deferred: workers imports this module's types

    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    if worker_class == "stream":
        times = _workers.time_stream_prefixes(grid_matrix, prefixes, repeats,
                                              hparams, seed)
        samples = [CalibrationSample(size, elapsed) for size, elapsed in zip(prefixes, times)]
        _check_resolution(samples)
        return samples
    if worker_class == "batch":
        stage_series = _workers.time_batch_prefixes(grid_matrix, prefixes, repeats,
                                                    hparams, batch_config, seed)
        out = {}
        for stage, times in stage_series.items():
            out[stage] = [CalibrationSample(size, elapsed)
                          for size, elapsed in zip(prefixes, times)]
        _check_resolution(out["kernel"])
        return out
    raise ValueError(f"unknown worker class {worker_class!r}")


def _check_resolution(samples) -> None:
    res = time.get_clock_info("perf_counter").resolution
    floor = max(res * 100, 2e-6)
    if samples and samples[0].elapsed < floor:
        raise CostModelError(
            f"smallest prefix ran in {samples[0].elapsed:.2e}s, too close to "
            "timer resolution; increase repeats or workload size")


def calibrate(matrix, hparams, batch_config, topology: DeviceTopology,
              segments: int = 16, repeats: int = 5, seed: int = 0) -> CalibrationProfile:
    """Full calibration pass: prefixes, measurements, fits, profile."""
    prefixes = make_prefixes(matrix, segments)
    stream_samples = measure_worker("stream", prefixes, repeats,
                                    grid_matrix=matrix, hparams=hparams, seed=seed)
    a2, b2 = fit_linear(stream_samples)
    stream_model = PiecewiseCostModel(family=FAMILY_LINEAR, a2=a2, b2=b2)
    batch_samples = measure_worker("batch", prefixes, repeats,
                                   grid_matrix=matrix, hparams=hparams,
                                   batch_config=batch_config, seed=seed)
    transfer_in = fit_piecewise(batch_samples["transfer_in"], FAMILY_SQRT_LOG)
    transfer_out = fit_piecewise(batch_samples["transfer_out"], FAMILY_SQRT_LOG)
    kernel = fit_piecewise(batch_samples["kernel"], FAMILY_LOG)
    fingerprint = {
        "n_stream": topology.n_stream,
        "n_batch": topology.n_batch,
        "batch_lanes": batch_config.lanes,
        "batch_overhead_ms": batch_config.launch_overhead * 1e3,
        "batch_bandwidth_mb": batch_config.bandwidth / 1e6,
        "n_factors": hparams.n_factors,
    }
    return CalibrationProfile(stream=stream_model, transfer_in=transfer_in,
                              transfer_out=transfer_out, kernel=kernel,
                              fingerprint=fingerprint)
