"""Command-line entry point.

Every subcommand reads a scenario, derives all randomness from ``--seed``,
writes its artifacts plus ``<subcommand>.json`` into the output directory and
exits 0. Validation problems exit 2, anything else that fails exits 1; both
print a JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, dpolicy, io, kernels, skeleton
from .channel import cancel_phase_error, ground_truth_paths, noise_var_for_snr, path_csi, synthesize_csi
from .config import ScenarioError, ScenarioFile, load_scenario
from .incentive import Allocation, PricingStrategy, check_constraints, oracle_optimal_pricing
from .smsp import coherence_ratio, perceive, rotation_factor, user_component_energy
from .spectral import estimate_paths

OUT_ENV = "WISENSE_OUT_DIR"
COMMANDS = ("simulate-csi", "estimate", "smsp", "skeleton-fit", "skeleton-predict",
            "incentive-oracle", "train-policy", "eval-policy", "pipeline")


def _seeds(seed: int) -> dict[str, int]:
    """Independent per-stage seeds derived from the master seed."""
    names = ("paths", "csi", "skeleton", "train", "eval_envs", "eval_chain")
    states = np.random.SeedSequence(seed).generate_state(len(names))
    return {n: int(s) for n, s in zip(names, states)}


class Context:
    def __init__(self, scenario: ScenarioFile, seed: int, out_dir: Path, args):
        self.sc = scenario
        self.seed = seed
        self.out = out_dir
        self.args = args
        self.seeds = _seeds(seed)
        self.out.mkdir(parents=True, exist_ok=True)
        self._streams = None

    def scene(self):
        return self.sc.build_scene()

    def simulate(self):
        if self._streams is None:
            scene = self.scene()
            paths = ground_truth_paths(scene, self.seeds["paths"])
            ch = self.sc.channel
            nv = {q: noise_var_for_snr(scene, p, ch.snr_db) for q, p in paths.items()}
            streams = synthesize_csi(scene, paths, nv, ch.phase_error, ch.n_frames, self.seeds["csi"])
            csi_path = getattr(self.args, "csi", None)
            if csi_path:
                streams = {h["receiver_id"]: io.stream_from_record(h, a) for h, a in io.read_dump(csi_path)}
            self._streams = (scene, paths, streams)
        return self._streams


def _path_rows(paths):
    return [{"kind": p.kind, "aoa_deg": float(np.rad2deg(p.aoa)), "tof_ns": p.tof * 1e9,
             "attenuation_magnitude_au": float(abs(p.attenuation))} for p in paths]


def cmd_simulate(ctx: Context) -> dict:
    scene, paths, streams = ctx.simulate()
    io.write_dump(ctx.out / "csi.bin", [io.csi_record(streams[q]) for q in sorted(streams)])
    return {"metrics": {"receivers": [{"receiver_id": q, "paths": _path_rows(paths[q]),
                                       "noise_var_power": streams[q].noise_var,
                                       "frame_count": streams[q].n_frames} for q in sorted(streams)],
                        "snr_db": ctx.sc.channel.snr_db},
            "artifacts": ["csi.bin"]}


def _user_path(paths):
    return next(p for p in paths if p.kind == "user_reflection")


def cmd_estimate(ctx: Context) -> dict:
    scene, paths, streams = ctx.simulate()
    cfg = ctx.sc.estimator_config()
    rows, arts = [], []
    for q in sorted(streams):
        est = estimate_paths(cancel_phase_error(streams[q]), scene, cfg)
        name = f"music_rx{q}.csv"
        if est.spectrum is not None:
            io.write_grid_csv(ctx.out / name, est.spectrum, cfg.grid.thetas, cfg.grid.taus)
            arts.append(name)
        u = _user_path(paths[q])
        row = {"receiver_id": q, "path_count": est.L, "peak_shortfall_count": est.shortfall,
               "peaks": [{"aoa_deg": float(np.rad2deg(a)), "tof_ns": t * 1e9, "pseudo_spectrum_au": v}
                         for a, t, v in est.peaks]}
        if est.peaks:
            best = min(est.peaks, key=lambda p: abs(p[0] - u.aoa) + abs(p[1] - u.tof) * 1e8)
            row["user_aoa_error_deg"] = float(abs(np.rad2deg(best[0] - u.aoa)))
            row["user_tof_error_ns"] = float(abs(best[1] - u.tof) * 1e9)
        rows.append(row)
    return {"metrics": {"receivers": rows}, "artifacts": arts}


def cmd_smsp(ctx: Context) -> dict:
    scene, paths, streams = ctx.simulate()
    res = perceive(streams, scene, ctx.sc.smsp_config())
    ids = [rx.id for rx in scene.rx]
    user_only = [path_csi(scene.frequencies, scene.n_antennas, scene.antenna_spacing,
                          _user_path(paths[q]).aoa, _user_path(paths[q]).tof,
                          _user_path(paths[q]).attenuation) for q in ids]
    rots = [rotation_factor(*res.rotation_params[q], scene) for q in ids]
    io.write_feature_csv(ctx.out / "features_frame0.csv", res.features[0])
    recs = []
    for u, fm in enumerate(res.features):
        recs.append(({"kind": "feature_phase_rad", "frame": u, "dtype": "<f8"}, fm.h_ph))
        recs.append(({"kind": "feature_amplitude", "frame": u, "dtype": "<f8"}, fm.h_am))
    io.write_dump(ctx.out / "features.bin", recs)
    loc = res.location
    return {"metrics": {
        "location_x_m": loc.pos[0], "location_y_m": loc.pos[1], "location_residual_m": loc.residual,
        "localization_error_m": float(np.hypot(loc.pos[0] - scene.user_pos[0],
                                               loc.pos[1] - scene.user_pos[1])),
        "s1_ratio": res.scores.s1.tolist(), "s2_ratio": res.scores.s2.tolist(),
        "beam_angle_deg": [float(np.rad2deg(res.beam_angles[q])) for q in ids],
        "rotation_aoa_deg": [float(np.rad2deg(res.rotation_params[q][0])) for q in ids],
        "rotation_tof_ns": [res.rotation_params[q][1] * 1e9 for q in ids],
        "user_energy_rotated_au": user_component_energy(user_only, res.scores.weights, rots),
        "user_energy_unrotated_au": user_component_energy(user_only, res.scores.weights),
        "coherence_ratio": coherence_ratio([h * r for h, r in zip(user_only, rots)]),
        "feature_frame_count": len(res.features)},
        "artifacts": ["features_frame0.csv", "features.bin"]}


def _positions(ctx: Context):
    s = ctx.sc.skeleton
    xs = np.linspace(*s.x_range_m, s.n_x)
    ys = np.linspace(*s.y_range_m, s.n_y)
    return [(float(x), float(y)) for x in xs for y in ys]


def _model_stem(ctx: Context) -> Path:
    return Path(getattr(ctx.args, "model", None) or ctx.out / "skeleton_model")


def cmd_skeleton_fit(ctx: Context) -> dict:
    s = ctx.sc.skeleton
    X, Y = skeleton.synthetic_dataset(ctx.scene(), _positions(ctx), s.snr_db, ctx.seeds["skeleton"],
                                      ctx.sc.smsp_config())
    model = skeleton.fit_baseline(X, Y, ridge=s.ridge)
    stem = _model_stem(ctx)
    model.save(stem)
    Yf = np.array([y.ravel() for y in Y])
    base = float(np.mean(np.sum((Yf - Yf.mean(0)) ** 2, axis=1)))
    losses = [skeleton.mse_loss(skeleton.predict(model, x), y) for x, y in zip(X, Y)]
    return {"metrics": {"sample_count": len(X), "train_loss_sum_au": float(np.mean(losses)),
                        "train_loss_per_entry_au": float(np.mean(losses)) / Yf.shape[1],
                        "mean_predictor_loss_sum_au": base},
            "artifacts": [stem.with_suffix(".json").name, stem.with_suffix(".npy").name]}


def cmd_skeleton_predict(ctx: Context) -> dict:
    stem = _model_stem(ctx)
    if not stem.with_suffix(".npy").exists():
        cmd_skeleton_fit(ctx)
    model = skeleton.PredictorModel.load(stem)
    scene = ctx.scene()
    X, Y = skeleton.synthetic_dataset(scene, [scene.user_pos], ctx.sc.skeleton.snr_db,
                                      ctx.seeds["skeleton"] + 1, ctx.sc.smsp_config())
    v = skeleton.predict(model, X[0])
    pts = skeleton.pair_skeleton(v)
    io.write_rows_csv(ctx.out / "keypoints.csv",
                      [{"keypoint": i, "x_norm": float(p[0]), "y_norm": float(p[1])} for i, p in enumerate(pts)],
                      ["keypoint", "x_norm", "y_norm"])
    loss = skeleton.mse_loss(v, Y[0])
    return {"metrics": {"loss_sum_au": loss, "loss_per_entry_au": loss / v.size,
                        "keypoints_norm": pts.tolist()},
            "artifacts": ["keypoints.csv"]}


def _oracle_row(env, grid, label):
    r = oracle_optimal_pricing(env, grid)
    rec = r.to_record()
    viol = check_constraints(r.strategy, r.allocation, env) if r.feasible else []
    return {"label": label, "feasible": rec["feasible"], "v_r_price": rec["v_r"], "I_b_price": rec["I_b"],
            "chi_s_units": rec["chi_s_units"], "chi_ag_units": rec["chi_ag_units"],
            "U_us_utility": rec["U_us"], "U_vsp_utility": rec["U_vsp"], "violations": viol}


def cmd_incentive_oracle(ctx: Context) -> dict:
    grid = ctx.sc.pricing_grid()
    main = _oracle_row(ctx.sc.env_state(), grid, "base")
    arts = []
    sweep = [_oracle_row(ctx.sc.env_state(max_aps=n), grid, f"max_aps={n}") for n in ctx.sc.economy.ap_sweep]
    if sweep:
        cols = ["max_aps_count", "v_r_price", "I_b_price", "chi_s_units", "chi_ag_units", "U_us_utility", "U_vsp_utility"]
        io.write_rows_csv(ctx.out / "ap_sweep.csv",
                          [dict({"max_aps_count": n}, **{k: r[k] for k in cols[1:]})
                           for n, r in zip(ctx.sc.economy.ap_sweep, sweep)], cols)
        arts.append("ap_sweep.csv")
    return {"metrics": {"oracle": main, "ap_sweep": sweep,
                        "violation_count": len(main["violations"]) + sum(len(r["violations"]) for r in sweep)},
            "artifacts": arts}


def _checkpoint_stem(ctx: Context) -> Path:
    return Path(getattr(ctx.args, "checkpoint", None) or ctx.out / "policy")


def cmd_train_policy(ctx: Context) -> dict:
    t = ctx.sc.training
    sched = dpolicy.BetaSchedule.linear(t.T, t.beta_min, t.beta_max)
    box = dpolicy.PricingBox.from_grid(ctx.sc.pricing_grid())
    res = dpolicy.train_policy(ctx.sc.env_sampler(), sched, ctx.sc.train_config(ctx.seeds["train"]), box)
    stem = _checkpoint_stem(ctx)
    dpolicy.save_checkpoint(res, stem)
    dpolicy.write_reward_curve(res.reward_curve, ctx.out / "reward_curve.csv")
    tail = res.reward_curve[-50:]
    return {"metrics": {"epoch_count": len(res.reward_curve),
                        "final_mean_reward_utility": float(np.mean([r["mean_reward"] for r in tail])),
                        "final_feasible_ratio": float(np.mean([r["feasible_fraction"] for r in tail]))},
            "artifacts": [stem.with_suffix(".json").name, stem.with_suffix(".npz").name, "reward_curve.csv"],
            "_wall": res.wall_time_s}


def cmd_eval_policy(ctx: Context) -> dict:
    stem = _checkpoint_stem(ctx)
    if not stem.with_suffix(".npz").exists():
        cmd_train_policy(ctx)
    res = dpolicy.load_checkpoint(stem)
    rng = np.random.default_rng(ctx.seeds["eval_envs"])
    envs = ctx.sc.env_sampler().sample(rng, ctx.sc.training.n_eval_envs)
    ev = dpolicy.evaluate_policy(res, envs, seed=ctx.seeds["eval_chain"])
    grid = ctx.sc.pricing_grid()
    rows, violations = [], 0
    for i, env in enumerate(envs):
        o = oracle_optimal_pricing(env, grid)
        ratio = float(ev["u_us"][i] / o.U_us) if o.feasible and o.U_us != 0 else float("nan")
        ok = bool(ev["accepted"][i]) and o.feasible and ev["u_us"][i] >= 0.9 * o.U_us
        if ev["accepted"][i]:
            s = PricingStrategy(float(ev["v_r"][i]), float(ev["I_b"][i]))
            alloc = Allocation.from_counts(int(ev["aps"][i]), int(ev["steps"][i]))
            violations += len(check_constraints(s, alloc, env))
        rows.append({"env_index": i, "v_r_policy_price": float(ev["v_r"][i]),
                     "I_b_policy_price": float(ev["I_b"][i]), "U_us_policy_utility": float(ev["u_us"][i]),
                     "U_us_oracle_utility": float(o.U_us), "utility_ratio": ratio,
                     "accepted": int(ev["accepted"][i]), "pass": int(ok)})
    io.write_rows_csv(ctx.out / "policy_vs_oracle.csv", rows, list(rows[0]))
    return {"metrics": {"env_count": len(envs), "pass_ratio": float(np.mean([r["pass"] for r in rows])),
                        "accepted_ratio": float(np.mean(ev["accepted"])),
                        "median_utility_ratio": float(np.nanmedian([r["utility_ratio"] for r in rows])),
                        "required_utility_ratio": 0.9, "violation_count": violations},
            "artifacts": ["policy_vs_oracle.csv"]}


STAGES = {
    "simulate-csi": cmd_simulate, "estimate": cmd_estimate, "smsp": cmd_smsp,
    "skeleton-fit": cmd_skeleton_fit, "skeleton-predict": cmd_skeleton_predict,
    "incentive-oracle": cmd_incentive_oracle, "train-policy": cmd_train_policy,
    "eval-policy": cmd_eval_policy,
}


def _digest(sc: ScenarioFile) -> str:
    return hashlib.sha256(sc.model_dump_json().encode()).hexdigest()


def _write_report(ctx: Context, command: str, body: dict, started: datetime, t0: float) -> dict:
    wall = body.pop("_wall", None)
    report = {"command": command, "scenario_name": ctx.sc.name, "scenario_sha256": _digest(ctx.sc),
              "seed": ctx.seed, "version": __version__, "kernel_backend": kernels.BACKEND, **body,
              "timing": {"started_utc": started.isoformat(), "wall_time_s": time.perf_counter() - t0}}
    if wall is not None:
        report["timing"]["training_wall_time_s"] = wall
    (ctx.out / f"{command}.json").write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=True))
    return report


def run(command: str, scenario: ScenarioFile, seed: int, out_dir: Path, args=None) -> dict:
    ctx = Context(scenario, seed, Path(out_dir), args or argparse.Namespace())
    if command == "pipeline":
        started, t0 = datetime.now(timezone.utc), time.perf_counter()
        stages = {}
        for name, fn in STAGES.items():
            s_started, s_t0 = datetime.now(timezone.utc), time.perf_counter()
            rep = _write_report(ctx, name, fn(ctx), s_started, s_t0)
            stages[name] = {"report": f"{name}.json", "metrics": rep["metrics"]}
        return _write_report(ctx, "pipeline", {"stages": stages}, started, t0)
    started, t0 = datetime.now(timezone.utc), time.perf_counter()
    return _write_report(ctx, command, STAGES[command](ctx), started, t0)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wisense", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--scenario", default="default_3rx",
                        help="TOML file or bundled name (default_3rx, ap_sweep, economy_default)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", default=None, help=f"defaults to ${OUT_ENV} or ./wisense_out")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scenario value, e.g. channel.snr_db=30")
        if name in ("estimate", "smsp"):
            sp.add_argument("--csi", default=None, help="read CSI from a dump instead of simulating")
        if name in ("skeleton-fit", "skeleton-predict"):
            sp.add_argument("--model", default=None, help="model path stem")
        if name in ("train-policy", "eval-policy"):
            sp.add_argument("--checkpoint", default=None, help="checkpoint path stem")
    return p


def _fail(kind: str, code: int, **info) -> int:
    print(json.dumps({"error": kind, **info}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = load_scenario(args.scenario, args.set)
    except ScenarioError as exc:
        return _fail("validation", 2, details=exc.details)
    out = Path(args.out_dir or os.environ.get(OUT_ENV) or scenario.output.dir or "wisense_out")
    try:
        report = run(args.command, scenario, args.seed, out, args)
    except ScenarioError as exc:
        return _fail("validation", 2, details=exc.details)
    except Exception as exc:  # noqa: BLE001  surfaced as a machine-readable error
        return _fail("runtime", 1, type=type(exc).__name__, message=str(exc))
    print(json.dumps({"command": args.command, "report": str(out / f"{report['command']}.json")}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
