"""Command line interface: synth, reconstruct, flow, eval, descriptor dump, pipeline.

Configs are line-oriented ``key = value`` files with ``[section]`` headers;
unknown keys are hard errors so typos cannot silently fall back to defaults.
Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as pio
from .descriptor import ParticleIndex, build_layout, evaluate
from .errors import NonFiniteError, Piv3dError
from .flow import (
    FlowField,
    RegularizerSpec,
    SolverConfig,
    particles_to_volume,
    solve_flow,
)
from .geometry import Domain, ParticleSet, make_rotated_camera
from .ipr import IprConfig, ipr_reconstruct
from .mart import MartConfig, build_ray_weights, extract_peaks, gamma_stretch, mart_reconstruct
from .metrics import aee, match_particles, rms_divergence
from .synth import (
    AnalyticFlow,
    SceneConfig,
    abc_flow,
    advect,
    render_scene,
    sample_gt_flow,
    sample_particles,
    taylor_green_flow,
    uniform_flow,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(Piv3dError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class UnknownKeyError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# config parsing

_SCENE_KEYS = {
    "domain", "image_size", "camera_angles", "ppp", "sigma",
    "intensity_lo", "intensity_hi", "seed", "noise_sigma",
    "flow", "flow_v0", "flow_amplitude", "flow_wavelengths", "flow_abc", "flow_scale",
}
_RECON_KEYS = {
    "method", "mart_iterations", "cone_radius", "gamma", "min_intensity",
    "eta", "theta", "ipr_sigma", "outer_iterations", "inner_iterations",
    "epsilon_start", "epsilon_end",
}
_SOLVER_KEYS = {
    "data_term", "regularizer", "alpha", "lambda", "pyramid_levels",
    "pyramid_factor", "warps_per_level", "inner_iterations", "window",
    "fd_probe_h", "stride",
}
_OUTPUT_KEYS = {"dir"}
_SECTIONS = {
    "scene": _SCENE_KEYS,
    "recon": _RECON_KEYS,
    "solver": _SOLVER_KEYS,
    "output": _OUTPUT_KEYS,
}


@dataclass
class PipelineConfig:
    """Parsed pipeline configuration; raw values keyed by section."""

    values: dict[str, dict[str, str]] = field(default_factory=dict)

    def get(self, section: str, key: str, default: str | None = None) -> str | None:
        return self.values.get(section, {}).get(key, default)

    def scene(self) -> SceneConfig:
        g = lambda k, d=None: self.get("scene", k, d)
        domain = Domain(tuple(int(t) for t in g("domain", "256 128 88").split()))
        image_size = tuple(int(t) for t in g("image_size", "375 200").split())
        angle_tokens = [float(t) for t in g(
            "camera_angles", "35 18  35 -18  -35 18  -35 -18").split()]
        cams = [make_rotated_camera(angle_tokens[i], angle_tokens[i + 1], image_size, domain)
                for i in range(0, len(angle_tokens), 2)]
        kind = g("flow", "taylor_green")
        if kind == "uniform":
            flow = uniform_flow(tuple(float(t) for t in g("flow_v0", "0 0 0").split()))
        elif kind == "taylor_green":
            flow = taylor_green_flow(
                float(g("flow_amplitude", "3.53")),
                tuple(float(t) for t in g("flow_wavelengths", "128 128 88").split()))
        elif kind == "abc":
            a, b, c = (float(t) for t in g("flow_abc", "1 1 1").split())
            flow = abc_flow(a, b, c, float(g("flow_scale", "64")),
                            float(g("flow_amplitude", "1.0")))
        else:
            raise ConfigError(f"unknown flow kind {kind!r}")
        return SceneConfig(
            domain=domain,
            cameras=cams,
            ppp=float(g("ppp", "0.05")),
            sigma=float(g("sigma", "1.0")),
            intensity_range=(float(g("intensity_lo", "0.3")), float(g("intensity_hi", "1.0"))),
            rng_seed=int(g("seed", "7")),
            flow=flow,
            noise_sigma=float(g("noise_sigma", "0.0")),
        )

    def recon_method(self) -> str:
        return self.get("recon", "method", "ipr")

    def mart_config(self) -> MartConfig:
        g = lambda k, d: self.get("recon", k, d)
        return MartConfig(
            n_iterations=int(g("mart_iterations", "5")),
            cone_radius=float(g("cone_radius", "0.75")),
            gamma=float(g("gamma", "0.7")),
        )

    def ipr_config(self) -> IprConfig:
        g = lambda k, d: self.get("recon", k, d)
        n_outer = int(g("outer_iterations", "24"))
        eps0 = float(g("epsilon_start", "0.8"))
        eps1 = float(g("epsilon_end", "2.0"))
        return IprConfig(
            eta=float(g("eta", "0.02")),
            sigma=float(g("ipr_sigma", "1.0")),
            theta=float(g("theta", "0.04")),
            epsilon_schedule=tuple(np.linspace(eps0, eps1, n_outer)),
            n_inner=int(g("inner_iterations", "40")),
        )

    def min_intensity(self) -> float:
        return float(self.get("recon", "min_intensity", "0.05"))

    def solver_config(self) -> SolverConfig:
        g = lambda k, d: self.get("solver", k, d)
        lam = self.get("solver", "lambda")
        return SolverConfig(
            lam=float(lam) if lam is not None else None,
            pyramid_levels=int(g("pyramid_levels", "9")),
            pyramid_factor=float(g("pyramid_factor", "0.95")),
            warps_per_level=int(g("warps_per_level", "10")),
            inner_iterations=int(g("inner_iterations", "20")),
            data_term=g("data_term", "sparse_ssd"),
            window=int(g("window", "13")),
            fd_probe_h=float(g("fd_probe_h", "0.5")),
            stride=int(g("stride", "4")),
        )

    def regularizer(self) -> RegularizerSpec:
        kind = self.get("solver", "regularizer", "qrd_inf")
        return RegularizerSpec(kind, float(self.get("solver", "alpha", "1.0")))

    def output_dir(self) -> Path:
        return Path(self.get("output", "dir", "out"))

    def serialize(self) -> str:
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {self.values[section][key]}")
            lines.append("")
        return "\n".join(lines)


def parse_config(path: str | Path) -> PipelineConfig:
    """Strict parse; unknown sections or keys raise with their line number."""
    values: dict[str, dict[str, str]] = {}
    section = None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise UnknownKeyError(f"unknown section [{section}]", lineno)
            values.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SECTIONS[section]:
            raise UnknownKeyError(f"unknown key {key!r} in [{section}]", lineno)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[section][key] = value
    config = PipelineConfig(values)
    config.scene()  # validate eagerly so errors surface at parse time
    config.solver_config()
    config.regularizer()
    return config


# ---------------------------------------------------------------------------
# stages

def _reconstruct_frame(images, scene: SceneConfig, config: PipelineConfig,
                       out_dir: Path, tag: str):
    method = config.recon_method()
    if method == "mart":
        mart_cfg = config.mart_config()
        weights = build_ray_weights(scene.cameras, scene.domain, mart_cfg.cone_radius)
        volume = mart_reconstruct(images, weights, mart_cfg)
        volume = gamma_stretch(volume, mart_cfg.gamma)
        pio.write_volume(out_dir / f"volume_{tag}.pfm3", volume)
        particles = extract_peaks(volume, config.min_intensity())
    elif method == "ipr":
        particles, log = ipr_reconstruct(images, scene.cameras, scene.domain,
                                         config.ipr_config(), return_log=True)
        (out_dir / f"ipr_log_{tag}.json").write_text(json.dumps(log, indent=1))
    else:
        raise ConfigError(f"unknown reconstruction method {method!r}")
    pio.write_particles_csv(out_dir / f"particles_{tag}_recon.csv", particles)
    return particles


def run_pipeline(config: PipelineConfig, resume_from: str | None = None) -> dict:
    """synth -> reconstruct(t0, t1) -> flow -> eval; all artifacts on disk."""
    out_dir = config.output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = config.scene()
    stride = config.solver_config().stride
    summary: dict = {"stages": {}, "config": config.serialize()}
    stages = ["synth", "reconstruct", "flow", "eval"]
    start_at = stages.index(resume_from) if resume_from else 0

    t = time.time()
    if start_at <= stages.index("synth"):
        truth0 = sample_particles(scene)
        truth1 = advect(truth0, scene.flow)
        images0 = render_scene(truth0, scene)
        images1 = render_scene(truth1, scene)
        gt = sample_gt_flow(scene.flow, scene.domain.extents, stride)
        pio.write_particles_csv(out_dir / "particles_t0.csv", truth0)
        pio.write_particles_csv(out_dir / "particles_t1.csv", truth1)
        for k, (img0, img1) in enumerate(zip(images0, images1)):
            pio.write_pfm(out_dir / f"img_t0_cam{k}.pfm", img0)
            pio.write_pfm(out_dir / f"img_t1_cam{k}.pfm", img1)
        pio.write_flow(out_dir / "gt_flow.fld", gt, stride)
        pio.write_cameras(out_dir / "cameras.txt", scene.cameras)
    else:
        truth0 = pio.read_particles_csv(out_dir / "particles_t0.csv", 0)
        truth1 = pio.read_particles_csv(out_dir / "particles_t1.csv", 1)
        images0 = [pio.read_pfm(out_dir / f"img_t0_cam{k}.pfm") for k in range(len(scene.cameras))]
        images1 = [pio.read_pfm(out_dir / f"img_t1_cam{k}.pfm") for k in range(len(scene.cameras))]
        gt, _ = pio.read_flow(out_dir / "gt_flow.fld")
    summary["stages"]["synth"] = {"seconds": time.time() - t, "n_particles": len(truth0)}

    t = time.time()
    method = config.recon_method()
    if start_at <= stages.index("reconstruct"):
        if method == "hacker":
            rec0, rec1 = truth0, truth1
            pio.write_particles_csv(out_dir / "particles_t0_recon.csv", rec0)
            pio.write_particles_csv(out_dir / "particles_t1_recon.csv", rec1)
        else:
            rec0 = _reconstruct_frame(images0, scene, config, out_dir, "t0")
            rec1 = _reconstruct_frame(images1, scene, config, out_dir, "t1")
    else:
        rec0 = pio.read_particles_csv(out_dir / "particles_t0_recon.csv", 0)
        rec1 = pio.read_particles_csv(out_dir / "particles_t1_recon.csv", 1)
    stats0 = match_particles(rec0, truth0)
    stats1 = match_particles(rec1, truth1)
    summary["stages"]["reconstruct"] = {
        "seconds": time.time() - t,
        "method": method,
        "t0": stats0.to_dict(),
        "t1": stats1.to_dict(),
    }

    t = time.time()
    solver_cfg = config.solver_config()
    reg = config.regularizer()
    if solver_cfg.data_term == "dense_ssd" and method == "mart":
        u0 = pio.read_volume(out_dir / "volume_t0.pfm3")
        u1 = pio.read_volume(out_dir / "volume_t1.pfm3")
        field = solve_flow(u0, u1, scene.domain, solver_cfg, reg)
    elif solver_cfg.data_term == "dense_ssd":
        u0 = particles_to_volume(rec0, scene.domain)
        u1 = particles_to_volume(rec1, scene.domain)
        field = solve_flow(u0, u1, scene.domain, solver_cfg, reg)
    else:
        field = solve_flow(rec0, rec1, scene.domain, solver_cfg, reg)
    pio.write_flow(out_dir / "flow.fld", field.vectors, field.stride)
    summary["stages"]["flow"] = {"seconds": time.time() - t,
                                 "data_term": solver_cfg.data_term,
                                 "regularizer": reg.kind}

    t = time.time()
    gt_field = FlowField(gt, stride)
    err = aee(field, gt_field)
    summary["stages"]["eval"] = {"seconds": time.time() - t}
    summary["aee"] = err
    summary["rms_divergence"] = rms_divergence(field)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["aee", "rms_divergence", "stages", "config"],
    "properties": {
        "aee": {"type": "number", "minimum": 0},
        "rms_divergence": {"type": "number", "minimum": 0},
        "config": {"type": "string"},
        "stages": {
            "type": "object",
            "required": ["synth", "reconstruct", "flow", "eval"],
            "properties": {
                "synth": {"type": "object", "required": ["seconds", "n_particles"]},
                "reconstruct": {"type": "object", "required": ["seconds", "method", "t0", "t1"]},
                "flow": {"type": "object", "required": ["seconds", "data_term", "regularizer"]},
                "eval": {"type": "object", "required": ["seconds"]},
            },
        },
    },
}


def _table2_desk(config: PipelineConfig, out_root: Path) -> str:
    """Initialization-method comparison at two desk densities, as a Markdown table."""
    densities = [0.05, 0.10]
    methods = ["mart", "ipr", "hacker"]
    rows: dict[str, dict[float, dict]] = {m: {} for m in methods}
    for ppp in densities:
        for method in methods:
            sub = PipelineConfig({k: dict(v) for k, v in config.values.items()})
            sub.values.setdefault("scene", {})["ppp"] = str(ppp)
            sub.values.setdefault("recon", {})["method"] = method
            sub.values.setdefault("output", {})["dir"] = str(
                out_root / f"{method}_ppp{ppp:g}")
            summary = run_pipeline(sub)
            rows[method][ppp] = summary
    lines = [
        "| Method | Quantity | " + " | ".join(f"ppp {p:g}" for p in densities) + " |",
        "|---|---|" + "---|" * len(densities),
    ]
    for method in methods:
        lines.append(f"| {method.upper()} | Avg. endpoint error | "
                     + " | ".join(f"{rows[method][p]['aee']:.4f}" for p in densities) + " |")
        if method != "hacker":
            for key, label in (("undetected", "Undetected particles"),
                               ("ghosts", "Ghost particles"),
                               ("avg_position_error", "Avg. position error")):
                vals = []
                for p in densities:
                    st = rows[method][p]["stages"]["reconstruct"]["t0"]
                    if key == "avg_position_error":
                        vals.append(f"{st[key]:.3f}")
                    else:
                        frac = st[f"{key}_fraction"] * 100.0
                        vals.append(f"{st[key]} ({frac:.2f}%)")
                lines.append(f"| {method.upper()} | {label} | " + " | ".join(vals) + " |")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument parsing

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="piv3d", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="worker threads for spatial queries")
    p.add_argument("--seed-override", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scene")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", required=True)

    rp = sub.add_parser("reconstruct", help="reconstruct particles from images")
    rp.add_argument("--method", choices=["mart", "ipr"], required=True)
    rp.add_argument("--images", nargs="+", required=True, help="PFM images, one per camera")
    rp.add_argument("--cameras", required=True, help="camera calibration file")
    rp.add_argument("--domain", required=True, help="N M L, e.g. '256 128 88'")
    rp.add_argument("--out", required=True, help="output particle CSV")
    rp.add_argument("--eta", type=float, default=0.02)
    rp.add_argument("--theta", type=float, default=0.04)
    rp.add_argument("--sigma", type=float, default=1.0)
    rp.add_argument("--outer", type=int, default=24)
    rp.add_argument("--inner", type=int, default=40)
    rp.add_argument("--iterations", type=int, default=5, help="MART iterations")
    rp.add_argument("--cone-radius", type=float, default=0.75)
    rp.add_argument("--gamma", type=float, default=0.7)
    rp.add_argument("--min-intensity", type=float, default=0.05)
    rp.add_argument("--volume-out", default=None, help="MART volume output (.pfm3)")
    rp.add_argument("--log-out", default=None, help="IPR per-iteration JSON log")

    fp = sub.add_parser("flow", help="estimate volumetric flow between two particle sets")
    fp.add_argument("--t0", required=True)
    fp.add_argument("--t1", required=True)
    fp.add_argument("--domain", required=True)
    fp.add_argument("--data", default="sparse_ssd",
                    choices=["sparse_ssd", "sparse_ncc", "dense_ssd"])
    fp.add_argument("--reg", default="qrd_inf", choices=["qr", "qrd_inf", "qrd_alpha"])
    fp.add_argument("--alpha", type=float, default=1.0)
    fp.add_argument("--lambda", dest="lam", type=float, default=None)
    fp.add_argument("--levels", type=int, default=9)
    fp.add_argument("--factor", type=float, default=0.95)
    fp.add_argument("--warps", type=int, default=10)
    fp.add_argument("--inner", type=int, default=20)
    fp.add_argument("--stride", type=int, default=4)
    fp.add_argument("--out", required=True)
    fp.add_argument("--csv-out", default=None, help="also export the flow as CSV")

    ep = sub.add_parser("eval", help="compare flow fields or particle sets")
    ep.add_argument("--estimated", required=True, help=".fld or .csv")
    ep.add_argument("--truth", required=True)
    ep.add_argument("--radius", type=float, default=2.0)
    ep.add_argument("--out", default=None, help="JSON stats output")

    dp = sub.add_parser("descriptor", help="descriptor utilities")
    dsub = dp.add_subparsers(dest="descriptor_command", required=True)
    dd = dsub.add_parser("dump", help="print the 331 descriptor values at a point")
    dd.add_argument("--particles", required=True)
    dd.add_argument("--at", required=True, help="x,y,z")

    pp = sub.add_parser("pipeline", help="run synth -> reconstruct -> flow -> eval")
    pp.add_argument("--config", required=True)
    pp.add_argument("--resume-from", default=None,
                    choices=["synth", "reconstruct", "flow", "eval"])
    pp.add_argument("--table2-desk", action="store_true",
                    help="run {mart, ipr, hacker} x {two densities} and print a Markdown table")
    return p


def _cmd_synth(args) -> int:
    config = parse_config(args.config)
    config.values.setdefault("output", {})["dir"] = args.out_dir
    scene = config.scene()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = sample_particles(scene)
    t1 = advect(t0, scene.flow)
    pio.write_particles_csv(out_dir / "particles_t0.csv", t0)
    pio.write_particles_csv(out_dir / "particles_t1.csv", t1)
    for k, cam in enumerate(scene.cameras):
        pio.write_pfm(out_dir / f"img_t0_cam{k}.pfm", render_scene(t0, scene)[k])
        pio.write_pfm(out_dir / f"img_t1_cam{k}.pfm", render_scene(t1, scene)[k])
    stride = config.solver_config().stride
    pio.write_flow(out_dir / "gt_flow.fld",
                   sample_gt_flow(scene.flow, scene.domain.extents, stride), stride)
    pio.write_cameras(out_dir / "cameras.txt", scene.cameras)
    print(f"wrote scene with {len(t0)} particles to {out_dir}")
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    images = [pio.read_pfm(p) for p in args.images]
    cameras = pio.read_cameras(args.cameras)
    domain = Domain(tuple(int(t) for t in args.domain.split()))
    if args.method == "mart":
        cfg = MartConfig(n_iterations=args.iterations, cone_radius=args.cone_radius,
                         gamma=args.gamma)
        weights = build_ray_weights(cameras, domain, cfg.cone_radius)
        volume = gamma_stretch(mart_reconstruct(images, weights, cfg), cfg.gamma)
        if args.volume_out:
            pio.write_volume(args.volume_out, volume)
        particles = extract_peaks(volume, args.min_intensity)
    else:
        cfg = IprConfig(eta=args.eta, theta=args.theta, sigma=args.sigma,
                        epsilon_schedule=tuple(np.linspace(0.8, 2.0, args.outer)),
                        n_inner=args.inner)
        particles, log = ipr_reconstruct(images, cameras, domain, cfg, return_log=True)
        if args.log_out:
            Path(args.log_out).write_text(json.dumps(log, indent=1))
    pio.write_particles_csv(args.out, particles)
    print(f"reconstructed {len(particles)} particles -> {args.out}")
    return EXIT_OK


def _cmd_flow(args) -> int:
    domain = Domain(tuple(int(t) for t in args.domain.split()))
    cfg = SolverConfig(lam=args.lam, pyramid_levels=args.levels, pyramid_factor=args.factor,
                       warps_per_level=args.warps, inner_iterations=args.inner,
                       data_term=args.data, stride=args.stride)
    spec = RegularizerSpec(args.reg, args.alpha)
    if args.data == "dense_ssd" and args.t0.endswith(".pfm3"):
        t0 = pio.read_volume(args.t0)
        t1 = pio.read_volume(args.t1)
    else:
        t0 = pio.read_particles_csv(args.t0, 0)
        t1 = pio.read_particles_csv(args.t1, 1)
        if args.data == "dense_ssd":
            t0 = particles_to_volume(t0, domain)
            t1 = particles_to_volume(t1, domain)
    field = solve_flow(t0, t1, domain, cfg, spec)
    pio.write_flow(args.out, field.vectors, field.stride)
    if args.csv_out:
        flat = field.vectors.reshape(-1, 3)
        pio.write_grid_csv(args.csv_out, flat)
    print(f"flow field {field.dims} stride {field.stride} -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if args.estimated.endswith(".fld"):
        est, stride_e = pio.read_flow(args.estimated)
        tru, stride_t = pio.read_flow(args.truth)
        stats = {"aee": aee(est, tru),
                 "rms_divergence_est": rms_divergence(FlowField(est, stride_e)),
                 "rms_divergence_truth": rms_divergence(FlowField(tru, stride_t))}
    else:
        est = pio.read_particles_csv(args.estimated)
        tru = pio.read_particles_csv(args.truth)
        stats = match_particles(est, tru, args.radius).to_dict()
    text = json.dumps(stats, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def _cmd_descriptor_dump(args) -> int:
    particles = pio.read_particles_csv(args.particles)
    center = np.array([float(t) for t in args.at.split(",")])
    values = evaluate(center, ParticleIndex(particles), build_layout())
    print(",".join(f"{v:.9g}" for v in values))
    return EXIT_OK


def _cmd_pipeline(args) -> int:
    config = parse_config(args.config)
    if args.seed_override is not None:
        config.values.setdefault("scene", {})["seed"] = str(args.seed_override)
    if args.table2_desk:
        table = _table2_desk(config, config.output_dir())
        print(table)
        (config.output_dir() / "table2_desk.md").write_text(table + "\n")
        return EXIT_OK
    summary = run_pipeline(config, resume_from=args.resume_from)
    print(json.dumps({"aee": summary["aee"],
                      "rms_divergence": summary["rms_divergence"]}, indent=1))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "reconstruct":
            return _cmd_reconstruct(args)
        if args.command == "flow":
            return _cmd_flow(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "descriptor":
            return _cmd_descriptor_dump(args)
        if args.command == "pipeline":
            return _cmd_pipeline(args)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Piv3dError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
