"""Pipeline orchestration.

    dsk gen-data|fit-ot|train-denoiser|sample|evaluate|baseline|report
        --config <path> [--seed N] [--threads N] [--out DIR] ...

Each stage reads its upstream artifacts from the output directory, writes
its own artifact plus a small .meta.json sidecar carrying the producing
config hash, and is deterministic for a fixed seed. Exit codes: 0 success,
2 configuration/input errors, 3 numerical failure. DSK_LOG sets verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import NumericalError, __version__
from .config import ConfigError, RunConfig, load_config
from .fields import (
    SelectionMask,
    SnapshotDataset,
    dataset_to_Y,
    load_dataset,
    save_dataset,
    select_rows,
)
from .seeding import rng_for

log = logging.getLogger("dsk")


def _setup_logging():
    level = os.environ.get("DSK_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path("runs") / args.cfg["name"]
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_sidecar(path: Path, cfg_hash: str, stage: str, extra: dict | None = None):
    meta = {"stage": stage, "config_hash": cfg_hash, "dsk_version": __version__}
    if extra:
        meta.update(extra)
    Path(str(path) + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n")


def _read_sidecar(path: Path) -> dict:
    sidecar = Path(str(path) + ".meta.json")
    if not sidecar.exists():
        return {}
    return json.loads(sidecar.read_text())


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {what}: expected artifact at {path}")
    return path


def _ks_config(section: dict, seed: int, extra_seed_tag: str):
    from .pde import KSConfig
    from .seeding import child_seed

    return KSConfig(seed=child_seed(seed, extra_seed_tag), **section)


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(args) -> None:
    from .pde import simulate

    cfg: RunConfig = args.cfg
    out = _out_dir(args)
    seed = cfg["seed"]
    cfg_hash = cfg.pipeline_hash()

    hf_cfg = _ks_config(cfg["hf"], seed, "hf")
    lf_cfg = _ks_config(cfg["lf"], seed, "lf")
    d_prime = cfg["selection"]["d_prime"]
    mask = SelectionMask(hf_cfg.n_grid, d_prime, cfg["selection"]["offset"])

    log.info("generating HF dataset (%d x %d snapshots, n=%d)",
             hf_cfg.n_trajectories, hf_cfg.n_snapshots_per_traj, hf_cfg.n_grid)
    hf = simulate(hf_cfg, "HF")
    hf.meta["config_hash"] = cfg_hash
    save_dataset(out / "hf.dsnp", hf)

    log.info("generating LF dataset (%d x %d snapshots, n=%d)",
             lf_cfg.n_trajectories, lf_cfg.n_snapshots_per_traj, lf_cfg.n_grid)
    lf_native = simulate(lf_cfg, "LF")
    lf = dataset_to_Y(lf_native, d_prime)
    lf.meta["config_hash"] = cfg_hash
    save_dataset(out / "lf.dsnp", lf)

    yprime = SnapshotDataset(select_rows(hf.values, mask), hf.L, {
        "fidelity": "HFLR",
        "selection": {"d": mask.d, "d_prime": mask.d_prime, "offset": mask.offset},
        "seed": seed,
        "config_hash": cfg_hash,
    })
    save_dataset(out / "yprime.dsnp", yprime)
    for name in ("hf.dsnp", "lf.dsnp", "yprime.dsnp"):
        _write_sidecar(out / name, cfg_hash, "gen-data")
    log.info("wrote %s, %s, %s", out / "hf.dsnp", out / "lf.dsnp", out / "yprime.dsnp")


def stage_fit_ot(args) -> None:
    from .ot import debias_dataset, save_transport, sinkhorn_fit

    cfg: RunConfig = args.cfg
    out = _out_dir(args)
    cfg_hash = cfg.pipeline_hash()
    lf = load_dataset(_require(out / "lf.dsnp", "low-fidelity dataset"))
    yprime = load_dataset(_require(out / "yprime.dsnp", "selected HF dataset"))

    n = cfg["ot"]["n_samples"]
    rng = rng_for(cfg["seed"], "fit-ot")
    src_idx = rng.choice(len(lf), size=min(n, len(lf)), replace=False)
    tgt_idx = rng.choice(len(yprime), size=min(n, len(yprime)), replace=False)
    source = lf.values[np.sort(src_idx)]
    target = yprime.values[np.sort(tgt_idx)]

    log.info("fitting entropic transport: %d x %d samples, eps=%g",
             len(source), len(target), cfg["ot"]["epsilon"])
    transport = sinkhorn_fit(source, target, cfg["ot"]["epsilon"],
                             max_iters=cfg["ot"]["max_iters"], tol=cfg["ot"]["tol"])
    log.info("sinkhorn: %d iterations, marginal error %.3e",
             transport.iterations_run, transport.marginal_error)
    save_transport(out / "ot.dotm", transport)
    _write_sidecar(out / "ot.dotm", cfg_hash, "fit-ot", {
        "iterations_run": transport.iterations_run,
        "marginal_error": transport.marginal_error,
    })

    debiased = debias_dataset(transport, lf)
    debiased.meta["config_hash"] = cfg_hash
    debiased.meta["paired_source"] = "lf.dsnp"
    save_dataset(out / "lf_debiased.dsnp", debiased)
    _write_sidecar(out / "lf_debiased.dsnp", cfg_hash, "fit-ot")
    log.info("wrote %s and %s", out / "ot.dotm", out / "lf_debiased.dsnp")


def stage_train(args) -> None:
    from .diffusion import TrainConfig, train
    from .unet import UNetConfig, build_model, save_model

    cfg: RunConfig = args.cfg
    out = _out_dir(args)
    cfg_hash = cfg.pipeline_hash()
    hf = load_dataset(_require(out / "hf.dsnp", "high-fidelity dataset"))

    ucfg = UNetConfig(input_length=hf.n_grid,
                      channels=tuple(cfg["unet"]["channels"]),
                      blocks_per_level=cfg["unet"]["blocks_per_level"],
                      emb_dim=cfg["unet"]["emb_dim"],
                      groups=cfg["unet"]["groups"],
                      kernel=cfg["unet"]["kernel"])
    model = build_model(ucfg, rng_for(cfg["seed"], "init-model"))
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    log.info("training denoiser: %d parameters, %d steps, batch %d",
             model.param_count, tcfg.steps, tcfg.batch_size)
    result = train(model, hf.values, tcfg,
                   log_every=max(1, tcfg.steps // 20))
    save_model(out / "denoiser.dkpt", result.model)
    _write_sidecar(out / "denoiser.dkpt", cfg_hash, "train-denoiser", {
        "param_count": result.model.param_count,
        "sigma_data": result.model.sigma_data,
        "val_loss_first": float(result.val_history[0]),
        "val_loss_last": float(result.val_history[-1]),
    })
    log.info("validation loss %.4f -> %.4f; wrote %s",
             result.val_history[0], result.val_history[-1], out / "denoiser.dkpt")


def stage_sample(args) -> None:
    from .conditioning import sample_conditional
    from .diffusion import sample_unconditional
    from .ot import barycentric_map, load_transport
    from .unet import load_model

    cfg: RunConfig = args.cfg
    out = _out_dir(args)
    cfg_hash = cfg.pipeline_hash()
    model = load_model(_require(out / "denoiser.dkpt", "trained denoiser"))
    lf = load_dataset(_require(out / "lf.dsnp", "low-fidelity dataset"))
    transport = load_transport(_require(out / "ot.dotm", "fitted transport map"))

    sampling = cfg["sampling"]
    n_cond = sampling["n_conditions"]
    spc = sampling["samples_per_condition"]
    n_steps = sampling["n_steps"]
    d = model.config.input_length
    mask = SelectionMask(d, lf.n_grid, cfg["selection"]["offset"])

    cond_rng = rng_for(cfg["seed"], "sample", "conditions")
    cond_idx = np.sort(cond_rng.choice(len(lf), size=min(n_cond, len(lf)), replace=False))
    raw_conditions = lf.values[cond_idx]
    ot_conditions = barycentric_map(transport, raw_conditions)

    common = dict(L=lf.L, seed=cfg["seed"], config_hash=cfg_hash)

    def emit(name: str, values: np.ndarray, conditions: np.ndarray | None, mode: str):
        meta = {"mode": mode, "samples_per_condition": spc if conditions is not None else 1,
                "n_steps": n_steps, "alpha_tilde": sampling["alpha_tilde"],
                "selection": {"d": mask.d, "d_prime": mask.d_prime, "offset": mask.offset},
                **{k: v for k, v in common.items() if k != "L"}}
        ds = SnapshotDataset(values, lf.L, meta)
        save_dataset(out / name, ds)
        _write_sidecar(out / name, cfg_hash, "sample", {"mode": mode})
        if conditions is not None:
            cond_ds = SnapshotDataset(conditions, lf.L, {"mode": mode + "-conditions",
                                                         "config_hash": cfg_hash})
            save_dataset(out / name.replace(".dsnp", "_conditions.dsnp"), cond_ds)
        log.info("wrote %s (%d samples)", out / name, len(values))

    log.info("sampling: %d conditions x %d, %d SDE steps, alpha_tilde=%g",
             n_cond, spc, n_steps, sampling["alpha_tilde"])
    ot_samples = sample_conditional(
        model, mask, ot_conditions, spc, n_steps,
        rng_for(cfg["seed"], "sample", "ot-cond"),
        alpha_tilde=sampling["alpha_tilde"],
        terminal_denoise=sampling["terminal_denoise"],
        batch_size=sampling["batch_size"])
    emit("samples_ot_cond.dsnp", ot_samples, ot_conditions, "ot-conditioned")

    raw_samples = sample_conditional(
        model, mask, raw_conditions, spc, n_steps,
        rng_for(cfg["seed"], "sample", "raw-cond"),
        alpha_tilde=sampling["alpha_tilde"],
        terminal_denoise=sampling["terminal_denoise"],
        batch_size=sampling["batch_size"])
    emit("samples_raw_cond.dsnp", raw_samples, raw_conditions, "raw-conditioned")

    n_uncond = sampling["n_unconditional"]
    if n_uncond > 0:
        uncond = sample_unconditional(model, n_uncond, n_steps,
                                      rng_for(cfg["seed"], "sample", "uncond"),
                                      terminal_denoise=sampling["terminal_denoise"])
        emit("samples_uncond.dsnp", uncond, None, "unconditional")


def stage_baseline(args) -> None:
    from .baselines import bcsd, cubic_upsample, fit_quantile_table, save_quantile_table

    cfg: RunConfig = args.cfg
    out = _out_dir(args)
    cfg_hash = cfg.pipeline_hash()
    hf = load_dataset(_require(out / "hf.dsnp", "high-fidelity dataset"))
    lf = load_dataset(_require(out / "lf.dsnp", "low-fidelity dataset"))
    debiased_path = out / "lf_debiased.dsnp"

    factor = hf.n_grid // lf.n_grid
    log.info("baselines: cubic and quantile-matched upsampling at %dx", factor)

    cubic_lf = cubic_upsample(lf.values, factor)
    ds = SnapshotDataset(cubic_lf, hf.L, {"mode": "cubic", "config_hash": cfg_hash,
                                          "paired_source": "lf.dsnp"})
    save_dataset(out / "baseline_cubic.dsnp", ds)
    _write_sidecar(out / "baseline_cubic.dsnp", cfg_hash, "baseline")

    table = fit_quantile_table(cubic_lf, hf.values)
    save_quantile_table(out / "qtable.dqtb", table)
    _write_sidecar(out / "qtable.dqtb", cfg_hash, "baseline")
    matched = bcsd(lf.values, table, factor)
    ds = SnapshotDataset(matched, hf.L, {"mode": "bcsd", "config_hash": cfg_hash,
                                         "paired_source": "lf.dsnp"})
    save_dataset(out / "baseline_bcsd.dsnp", ds)
    _write_sidecar(out / "baseline_bcsd.dsnp", cfg_hash, "baseline")

    if debiased_path.exists():
        debiased = load_dataset(debiased_path)
        cubic_ot = cubic_upsample(debiased.values, factor)
        ds = SnapshotDataset(cubic_ot, hf.L, {"mode": "ot-cubic", "config_hash": cfg_hash,
                                              "paired_source": "lf.dsnp"})
        save_dataset(out / "baseline_ot_cubic.dsnp", ds)
        _write_sidecar(out / "baseline_ot_cubic.dsnp", cfg_hash, "baseline")
    log.info("baseline artifacts written to %s", out)


def _evaluate_pair(cfg: RunConfig, pred: SnapshotDataset, ref: SnapshotDataset,
                   pred_dir: Path):
    from .metrics import evaluate_ensembles, log_energy_ratio_curve, median_pairwise_distance

    mcfg = cfg["metrics"]
    scales = np.asarray(mcfg["mmd_bandwidth_scales"], dtype=np.float64)
    med = median_pairwise_distance(pred.values, ref.values)
    bandwidths = med * scales

    spc = pred.meta.get("samples_per_condition")
    constraint = None
    paired = None
    mode = pred.meta.get("mode", "")
    if mode.endswith("conditioned"):
        sel = pred.meta["selection"]
        mask = SelectionMask(sel["d"], sel["d_prime"], sel["offset"])
        cond_file = pred_dir / f"samples_{'ot' if mode.startswith('ot') else 'raw'}_cond_conditions.dsnp"
        if cond_file.exists():
            conditions = load_dataset(cond_file).values
            expanded = np.repeat(conditions, spc, axis=0)
            constraint = (expanded, mask.indices)
    src_name = pred.meta.get("paired_source")
    if src_name:
        src_path = pred_dir / src_name
        if src_path.exists():
            src = load_dataset(src_path)
            if src.values.shape == pred.values.shape:
                paired = src.values

    report = evaluate_ensembles(
        pred.values, ref.values,
        mmd_bandwidths=bandwidths,
        samples_per_condition=spc if spc and spc > 1 else None,
        paired_source=paired,
        constraint=constraint,
        wass1_support=tuple(mcfg["wass1_range"]),
        wass1_bins=mcfg["wass1_bins"],
        kde_grid=mcfg["kde_grid"],
    )
    curve = log_energy_ratio_curve(pred.values, ref.values)
    return report, curve


def stage_evaluate(args) -> None:
    from .metrics import save_energy_ratio_csv, save_report

    cfg: RunConfig = args.cfg
    out = _out_dir(args)
    pred_path = _require(Path(args.pred), "prediction ensemble")
    ref_path = _require(Path(args.ref), "reference ensemble")
    pred = load_dataset(pred_path)
    ref = load_dataset(ref_path)
    if pred.n_grid != ref.n_grid:
        raise ConfigError(f"ensemble dimensions differ: {pred.n_grid} vs {ref.n_grid}")

    report, curve = _evaluate_pair(cfg, pred, ref, pred_path.parent)
    stem = args.tag or pred_path.stem
    report_path = out / f"metrics_{stem}.json"
    save_report(report_path, report, extra={
        "pred": str(pred_path), "ref": str(ref_path),
        "config_hash": pred.meta.get("config_hash", ""),
    })
    save_energy_ratio_csv(out / f"energy_ratio_{stem}.csv", curve)
    log.info("wrote %s", report_path)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


_REPORT_ROWS = [
    ("LFLR", "lf.dsnp", "yprime.dsnp"),
    ("OT", "lf_debiased.dsnp", "yprime.dsnp"),
    ("OT+Cubic", "baseline_ot_cubic.dsnp", "hf.dsnp"),
    ("BCSD", "baseline_bcsd.dsnp", "hf.dsnp"),
    ("Raw+cDfn", "samples_raw_cond.dsnp", "hf.dsnp"),
    ("OT+cDfn", "samples_ot_cond.dsnp", "hf.dsnp"),
]


def stage_report(args) -> None:
    from .metrics import save_energy_ratio_csv, save_report

    cfg: RunConfig = args.cfg
    out = _out_dir(args)
    rows = []
    hashes = set()
    for label, pred_name, ref_name in _REPORT_ROWS:
        pred_path = out / pred_name
        if not pred_path.exists():
            log.warning("skipping %s: %s not present", label, pred_path)
            continue
        pred = load_dataset(pred_path)
        ref = load_dataset(_require(out / ref_name, f"reference for {label}"))
        hashes.add(_read_sidecar(pred_path).get("config_hash", ""))
        report, curve = _evaluate_pair(cfg, pred, ref, out)
        stem = label.lower().replace("+", "_")
        save_report(out / f"metrics_{stem}.json", report,
                    extra={"method": label})
        save_energy_ratio_csv(out / f"energy_ratio_{stem}.csv", curve)
        rows.append((label, report))

    if len(hashes - {""}) > 1 and not args.force:
        raise ConfigError(f"mixed config hashes across artifacts: {sorted(hashes)} "
                          "(pass --force to collate anyway)")

    cols = ["covRMSE", "MELRu", "MELRw", "KLD", "Wass1", "MMD", "Var",
            "sMAPE", "constraintRMSE"]
    table = {label: {c: getattr(r, c) for c in cols} for label, r in rows}
    (out / "report.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")

    header = "method".ljust(10) + "".join(c.rjust(15) for c in cols)
    print(header)
    for label, r in rows:
        cells = []
        for c in cols:
            v = getattr(r, c)
            cells.append(("-" if v is None else f"{v:.4g}").rjust(15))
        print(label.ljust(10) + "".join(cells))
    log.info("wrote %s", out / "report.json")


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsk", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"dsk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the run-config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--threads", type=int, default=None, help="cap worker threads")
        p.add_argument("--out", default=None, help="artifact directory (default runs/<name>)")

    for name, fn in [("gen-data", stage_gen_data), ("fit-ot", stage_fit_ot),
                     ("train-denoiser", stage_train), ("sample", stage_sample),
                     ("baseline", stage_baseline)]:
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("evaluate")
    common(p)
    p.add_argument("--pred", required=True, help="prediction ensemble (DSNP)")
    p.add_argument("--ref", required=True, help="reference ensemble (DSNP)")
    p.add_argument("--tag", default=None, help="output name tag")
    p.set_defaults(fn=stage_evaluate)

    p = sub.add_parser("report")
    common(p)
    p.add_argument("--force", action="store_true",
                   help="collate artifacts even if config hashes differ")
    p.set_defaults(fn=stage_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.raw["seed"] = args.seed
        if args.threads is not None:
            try:
                import numba
                numba.set_num_threads(max(1, args.threads))
            except ImportError:
                pass
        args.cfg = cfg
        args.fn(args)
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return 2
    except NumericalError as e:
        log.error("numerical failure: %s", e)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
