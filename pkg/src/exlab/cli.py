"""Command-line entry point: config parsing, subcommand dispatch, manifests.

Config files are flat `key = value` lines (# comments allowed); unknown keys
are rejected.  Every run writes a manifest.json recording the config
snapshot, code version, seed, timestamps, and sha256 hashes of all outputs,
even when the run fails.

Exit codes: 0 success, 2 acceptance-check violation, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__, experiments, field, kacrice, kernels, topology

SUBCOMMANDS = (
    "sample",
    "count",
    "var-scan",
    "interp-scan",
    "intensity",
    "pivotal",
    "bound",
    "kacrice-check",
    "refine",
)

_FAMILY_ALIASES = {
    "bargmann-fock": "bargmann_fock",
    "bargmann_fock": "bargmann_fock",
    "cauchy": "cauchy",
    "random-plane-wave": "random_plane_wave",
    "random_plane_wave": "random_plane_wave",
    "rpw": "random_plane_wave",
    "monochromatic": "monochromatic",
    "table": "table",
}

_KNOWN_KEYS = {
    "kernel.family",
    "kernel.dimension",
    "kernel.beta",
    "kernel.wave_number",
    "kernel.table",
    "level",
    "star",
    "sizes",
    "replications",
    "t_grid",
    "seed",
    "h",
    "padding",
    "workers",
    "n_waves",
    "dl",
    "n_samples",
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str, line_no: int):
    try:
        if key in ("sizes", "t_grid"):
            return tuple(float(v) for v in raw.split(","))
        if key in ("replications", "workers", "n_waves", "n_samples", "kernel.dimension", "seed"):
            return int(raw)
        if key in ("level", "h", "padding", "dl", "kernel.beta", "kernel.wave_number"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"line {line_no}: bad value for {key}: {raw!r}") from exc


def parse_config(path) -> tuple[experiments.ExperimentConfig, dict]:
    """Strictly parse a flat key-value config file.

    Returns the experiment config plus run extras (n_samples) not owned by
    the experiments module.
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    raw: dict = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {line_no}: expected 'key = value', got {stripped!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key not in _KNOWN_KEYS:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            if key in raw:
                raise ConfigError(f"line {line_no}: duplicate key {key!r}")
            raw[key] = _parse_value(key, value.strip(), line_no)

    if "kernel.family" not in raw:
        raise ConfigError("missing required key kernel.family")
    family = _FAMILY_ALIASES.get(str(raw["kernel.family"]).lower())
    if family is None:
        raise ConfigError(f"unknown kernel.family {raw['kernel.family']!r}")
    dimension = raw.get("kernel.dimension", 2)
    if family == "cauchy":
        if "kernel.beta" not in raw:
            raise ConfigError("kernel.family = cauchy requires kernel.beta")
        kernel = kernels.KernelSpec.cauchy(raw["kernel.beta"], dimension=dimension)
    elif family == "table":
        if "kernel.table" not in raw:
            raise ConfigError("kernel.family = table requires kernel.table (a file path)")
        kernel = kernels.KernelSpec.from_table_file(raw["kernel.table"], dimension=dimension)
    elif family == "random_plane_wave":
        kernel = kernels.KernelSpec.random_plane_wave()
    elif family == "monochromatic":
        kernel = kernels.KernelSpec.monochromatic(
            dimension=dimension, wave_number=raw.get("kernel.wave_number", 1.0)
        )
    else:
        kernel = kernels.KernelSpec.bargmann_fock(dimension=dimension)

    if "seed" not in raw:
        raise ConfigError("missing required key seed")
    star = raw.get("star", topology.ES).upper()
    workers = raw.get("workers", 0) or (os.cpu_count() or 1)
    config = experiments.ExperimentConfig(
        kernel=kernel,
        level=raw.get("level", 0.0),
        star=star,
        sizes=tuple(raw.get("sizes", (20.0, 40.0, 80.0, 160.0))),
        replications=raw.get("replications", 400),
        t_grid=tuple(raw.get("t_grid", (0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0))),
        master_seed=raw["seed"],
        spacing=raw.get("h", 0.25),
        padding=raw.get("padding", 8.0),
        workers=workers,
        n_waves=raw.get("n_waves", 1024),
        dl=raw.get("dl", 0.1),
    )
    extras = {"n_samples": raw.get("n_samples", 2000), "raw": raw}
    return config, extras


# ---------------------------------------------------------------------------
# output helpers and the run manifest
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    code_version: str
    master_seed: int
    started: str
    finished: str = ""
    status: str = "running"
    outputs: list = dataclasses.field(default_factory=list)

    def record(self, path) -> None:
        self.outputs.append({"path": os.path.basename(path), "sha256": _sha256(path)})

    def write(self, out_dir) -> None:
        self.finished = time.strftime("%Y-%m-%dT%H:%M:%S")
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2)
            fh.write("\n")


def _write_csv(path, rows: list[dict], manifest: RunManifest) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    manifest.record(path)


def _write_json(path, payload: dict, manifest: RunManifest) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=float)
        fh.write("\n")
    manifest.record(path)


# ---------------------------------------------------------------------------
# subcommand implementations (return exit codes)
# ---------------------------------------------------------------------------


def _cmd_sample(config, extras, out_dir, manifest) -> int:
    grid = config.grid(config.sizes[0])
    if config.kernel.family == "random_plane_wave":
        sample = field.sample_rpw(grid, n_waves=config.n_waves, seed=config.master_seed)
    else:
        sample = field.sample_field(config.kernel, grid, config.master_seed)
    path = os.path.join(out_dir, "field.bin")
    field.write_sample(sample, path)
    manifest.record(path)
    _write_json(
        os.path.join(out_dir, "summary.json"),
        {
            "R": config.sizes[0],
            "spacing": config.spacing,
            "empirical_variance": float(sample.values.var()),
        },
        manifest,
    )
    return 0


def _cmd_count(config, extras, out_dir, manifest) -> int:
    grid = config.grid(config.sizes[0])
    if config.kernel.family == "random_plane_wave":
        sample = field.sample_rpw(grid, n_waves=config.n_waves, seed=config.master_seed)
    else:
        sample = field.sample_field(config.kernel, grid, config.master_seed)
    cc = topology.count_excursion_components(sample, config.level)
    rows = [
        {
            "R": config.sizes[0],
            "level": config.level,
            "n_excursion": cc.n_excursion,
            "n_level": cc.n_level,
            "n_boundary_touching": cc.n_boundary_touching,
        }
    ]
    _write_csv(os.path.join(out_dir, "counts.csv"), rows, manifest)
    return 0


def _cmd_var_scan(config, extras, out_dir, manifest) -> int:
    scan = experiments.run_variance_scan(config)
    _write_csv(os.path.join(out_dir, "variance.csv"), scan.rows, manifest)
    fit = experiments.fit_scaling(scan)
    sigma2, sigma2_se = experiments.estimate_sigma_squared(scan, config.kernel.dimension)
    _write_json(
        os.path.join(out_dir, "summary.json"),
        {
            "slope": fit.slope,
            "intercept": fit.intercept,
            "slope_ci_95": list(fit.slope_ci_95),
            "r_squared": fit.r_squared,
            "sigma2_hat": sigma2,
            "sigma2_se": sigma2_se,
        },
        manifest,
    )
    return 0


def _cmd_interp_scan(config, extras, out_dir, manifest) -> int:
    scan = experiments.run_interpolation_scan(config)
    _write_csv(os.path.join(out_dir, "interpolation.csv"), scan.rows, manifest)
    report = experiments.check_monotone_convex(scan.rows)
    _write_json(
        os.path.join(out_dir, "summary.json"),
        {
            "monotonicity_violations": report.monotonicity_violations,
            "convexity_violations": report.convexity_violations,
            "passed": report.passed,
        },
        manifest,
    )
    return 0 if report.passed else 2


def _cmd_intensity(config, extras, out_dir, manifest) -> int:
    one = kacrice.one_point_critical_intensity(
        config.kernel, config.level, seed=config.master_seed
    )
    d = config.kernel.dimension
    rows = []
    for t in config.t_grid:
        for r in (0.25, 0.5, 1.0, 2.0):
            if t == 1.0 and r == 0.0:
                continue
            u = (r,) + (0.0,) * (d - 1)
            est = kacrice.two_point_critical_intensity(
                config.kernel, config.level, min(t, 0.999), u,
                n_samples=extras["n_samples"], seed=config.master_seed,
            )
            rows.append(
                {"t": t, **{f"u{i+1}": u[i] for i in range(d)},
                 "value": est.value, "se": est.std_error, "n": est.n_samples}
            )
    _write_csv(os.path.join(out_dir, "intensity.csv"), rows, manifest)
    _write_json(
        os.path.join(out_dir, "summary.json"),
        {"one_point_value": one.value, "one_point_se": one.std_error, "level": config.level},
        manifest,
    )
    return 0


def _cmd_pivotal(config, extras, out_dir, manifest) -> int:
    grid = config.grid(max(config.sizes[0], 64.0))
    scan = kacrice.one_point_pivotal_scan(
        config.kernel, grid, config.level, config.star,
        n_samples=extras["n_samples"], master_seed=config.master_seed,
    )
    rows = [
        {"class": cls, "value": est.value, "se": est.std_error, "n": est.n_samples}
        for cls, est in scan.estimates.items()
    ]
    _write_csv(os.path.join(out_dir, "pivotal.csv"), rows, manifest)
    total = kacrice.one_point_critical_intensity(
        config.kernel, config.level, seed=config.master_seed
    )
    combined_se = math.sqrt(
        sum(est.std_error**2 for est in scan.estimates.values()) + total.std_error**2
    )
    partition_ok = abs(scan.total_intensity - total.value) <= 3.0 * combined_se + 0.01 * total.value
    _write_json(
        os.path.join(out_dir, "summary.json"),
        {
            "difference_value": scan.difference_value,
            "difference_se": scan.difference_se,
            "level_derivative_prediction": -scan.difference_value,
            "unstable_fraction": scan.unstable_fraction,
            "excluded_weight": scan.excluded_weight,
            "class_sum_with_excluded": scan.total_intensity,
            "kacrice_total": total.value,
            "partition_ok": partition_ok,
        },
        manifest,
    )
    return 0 if partition_ok else 2


def _cmd_bound(config, extras, out_dir, manifest) -> int:
    rows = []
    for size in config.sizes:
        rows.append({"R": size, "bound_value": kacrice.variance_upper_bound(config.kernel, size)})
    _write_csv(os.path.join(out_dir, "bound.csv"), rows, manifest)
    log_r = np.log([row["R"] for row in rows])
    log_b = np.log([row["bound_value"] for row in rows])
    slope = float(np.polyfit(log_r, log_b, 1)[0])
    _write_json(os.path.join(out_dir, "summary.json"), {"slope": slope}, manifest)
    return 0


def _cmd_kacrice_check(config, extras, out_dir, manifest) -> int:
    rng = np.random.default_rng(np.random.SeedSequence(config.master_seed))
    checks = {}

    worst_scale = 0.0
    worst_schur = 0.0
    for _ in range(50):
        a = rng.standard_normal((3, 3))
        s = a @ a.T + 0.1 * np.eye(3)
        worst_scale = max(worst_scale, abs(kacrice.dc(4.0 * s) / (64.0 * kacrice.dc(s)) - 1.0))
        b = rng.standard_normal((4, 4))
        s4 = b @ b.T + 0.1 * np.eye(4)
        dc_joint = kacrice.dc(s4)
        dc_y = kacrice.dc(s4[2:, 2:])
        schur = s4[:2, :2] - s4[:2, 2:] @ np.linalg.solve(s4[2:, 2:], s4[2:, :2])
        worst_schur = max(worst_schur, abs(dc_joint / (dc_y * kacrice.dc(schur)) - 1.0))
    checks["dc_scaling_max_rel_err"] = worst_scale
    checks["dc_schur_max_rel_err"] = worst_schur

    mono_ok = True
    for r in (0.1, 0.5, 1.0):
        u = (r,) + (0.0,) * (config.kernel.dimension - 1)
        vals = [kacrice.pair_jet_dc(config.kernel, t, u) for t in np.linspace(0.0, 0.999, 15)]
        mono_ok = mono_ok and all(a >= b - 1e-9 for a, b in zip(vals, vals[1:]))
    checks["dc_monotone_in_t"] = mono_ok

    report = kacrice.dc_lower_bound_check(config.kernel)
    checks["numbound_min_ratio_near"] = report.min_ratio_near
    checks["numbound_min_dc_far"] = report.min_dc_far
    checks["numbound_stable"] = report.stable
    ok = (
        worst_scale < 1e-9
        and worst_schur < 1e-9
        and mono_ok
        and report.passed
    )
    checks["passed"] = ok
    _write_json(os.path.join(out_dir, "kacrice_check.json"), checks, manifest)
    return 0 if ok else 2


def _cmd_refine(config, extras, out_dir, manifest) -> int:
    h_values = [config.spacing * 2.0, config.spacing, config.spacing / 2.0]
    h_values = [h for h in h_values if h <= 0.5]
    report = experiments.run_h_refinement_study(config, h_values)
    _write_csv(os.path.join(out_dir, "refinement.csv"), report["rows"], manifest)
    _write_json(
        os.path.join(out_dir, "summary.json"),
        {"extrapolated": report["extrapolated"], "converged_h": report["converged_h"]},
        manifest,
    )
    return 0


_HANDLERS = {
    "sample": _cmd_sample,
    "count": _cmd_count,
    "var-scan": _cmd_var_scan,
    "interp-scan": _cmd_interp_scan,
    "intensity": _cmd_intensity,
    "pivotal": _cmd_pivotal,
    "bound": _cmd_bound,
    "kacrice-check": _cmd_kacrice_check,
    "refine": _cmd_refine,
}


def dispatch(subcommand: str, config, extras, out_dir) -> int:
    """Run one subcommand, writing outputs and a manifest (even on failure)."""
    if subcommand not in _HANDLERS:
        print(f"unknown subcommand {subcommand!r}; choose from {SUBCOMMANDS}", file=sys.stderr)
        return 1
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(
        subcommand=subcommand,
        config=extras.get("raw", {}),
        code_version=__version__,
        master_seed=config.master_seed,
        started=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    try:
        code = _HANDLERS[subcommand](config, extras, out_dir, manifest)
        manifest.status = "ok" if code == 0 else f"exit-{code}"
        return code
    except Exception as exc:  # manifest must record the failure
        manifest.status = f"error: {exc}"
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        manifest.write(out_dir)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="exlab",
        description="Monte Carlo laboratory for excursion/level set component counts",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="flat key=value config file")
    parser.add_argument("--out", default="exlab-out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--workers", type=int, default=None, help="override worker count")
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 1

    try:
        config, extras = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        config = dataclasses.replace(config, master_seed=args.seed)
        extras["raw"]["seed"] = args.seed
    if args.workers is not None:
        config = dataclasses.replace(config, workers=args.workers)
    return dispatch(args.subcommand, config, extras, args.out)


if __name__ == "__main__":
    sys.exit(main())
