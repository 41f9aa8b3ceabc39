"""Config-driven command line for training, evaluation, and probes.

One YAML file describes a run; subcommands reuse the same loader and
differ only in what they do with the resolved configuration.  Every key
is validated against the engine's config types at load time, unknown
keys are rejected with their full path, and errors exit nonzero with a
message naming the offending field.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from epconv.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from epconv.config import (ConfigError, DynamicsConfig, EPConfig, LayerSpec,
                           NetworkConfig, PoolingSpec, SpikingConfig)
from epconv.data import load_split, subset
from epconv.dynamics import init_parameters
from epconv.seeding import substream
from epconv.training import evaluate, fit, onehot, sgd_update

CONFIG_VERSION = 1
MODES = ("snn-ep", "snn-bptt", "crnn-ep", "crnn-bptt")


class RunConfigError(ConfigError):
    """Config file problem, annotated with the field path."""


@dataclass
class RunConfig:
    network: NetworkConfig
    dynamics: DynamicsConfig
    spiking: SpikingConfig
    ep: EPConfig
    data_dir: Path
    train_subset: int | None
    stratified: bool
    mode: str
    out: Path
    seed: int
    workers: int
    gradcheck: dict
    probe: dict
    raw: dict

    @property
    def neuron_model(self) -> str:
        return self.mode.split("-")[0]

    @property
    def trainer(self) -> str:
        return self.mode.split("-")[1]


def _fail(path, msg):
    raise RunConfigError(f"{path}: {msg}")


def _take(d: dict, path: str, key: str, default=None, required=False):
    if key in d:
        return d.pop(key)
    if required:
        _fail(f"{path}.{key}", "missing required key")
    return default


def _no_leftovers(d: dict, path: str):
    if d:
        _fail(f"{path}.{sorted(d)[0]}", "unknown key")


def _pooling(d, path):
    if d is None:
        return None
    if not isinstance(d, dict):
        _fail(path, "pooling must be a mapping")
    d = dict(d)
    kind = _take(d, path, "kind", required=True)
    size = _take(d, path, "size", required=True)
    alpha = _take(d, path, "alpha")
    _no_leftovers(d, path)
    return PoolingSpec(kind=kind, size=int(size),
                       alpha=None if alpha is None else float(alpha))


def _layer(d, path):
    if not isinstance(d, dict):
        _fail(path, "layer must be a mapping")
    d = dict(d)
    kind = _take(d, path, "kind", required=True)
    if kind == "conv":
        spec = LayerSpec(
            kind="conv",
            channels=int(_take(d, path, "channels", required=True)),
            kernel=int(_take(d, path, "kernel", required=True)),
            stride=int(_take(d, path, "stride", 1)),
            padding=int(_take(d, path, "padding", 0)),
            pooling=_pooling(_take(d, path, "pooling"), f"{path}.pooling"),
        )
    elif kind == "linear":
        spec = LayerSpec(kind="linear",
                         features=int(_take(d, path, "features", required=True)))
    else:
        _fail(f"{path}.kind", f"unknown layer kind {kind!r}")
    _no_leftovers(d, path)
    return spec


def _network(d, path):
    if not isinstance(d, dict):
        _fail(path, "must be a mapping")
    d = dict(d)
    shape = _take(d, path, "input_shape", required=True)
    layers = _take(d, path, "layers", required=True)
    _no_leftovers(d, path)
    if not isinstance(layers, list) or not layers:
        _fail(f"{path}.layers", "must be a non-empty list")
    return NetworkConfig(
        input_shape=tuple(int(v) for v in shape),
        layers=tuple(_layer(l, f"{path}.layers[{i}]") for i, l in enumerate(layers)),
    )


def _section(d, path, builder, defaults: dict):
    d = dict(d or {})
    kwargs = {}
    for key, conv in defaults.items():
        if key in d:
            kwargs[key] = conv(d.pop(key))
    _no_leftovers(d, path)
    try:
        return builder(**kwargs)
    except ConfigError as e:
        _fail(path, str(e))


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise RunConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise RunConfigError(f"{path}: not valid YAML: {e}")
    if not isinstance(raw, dict):
        raise RunConfigError(f"{path}: top level must be a mapping")
    d = dict(raw)

    version = _take(d, "config", "config_version", required=True)
    if int(version) != CONFIG_VERSION:
        _fail("config_version", f"expected {CONFIG_VERSION}, got {version}")

    network = _network(_take(d, "config", "network", required=True), "network")
    dynamics = _section(_take(d, "config", "dynamics"), "dynamics", DynamicsConfig, {
        "step_size": float, "t_free": int, "t_nudge": int})
    spiking = _section(_take(d, "config", "spiking"), "spiking", SpikingConfig, {
        "decay": float, "threshold": float})
    ep = _section(_take(d, "config", "ep"), "ep", EPConfig, {
        "beta": float, "loss": str,
        "learning_rates": lambda v: tuple(float(x) for x in v),
        "batch_size": int, "epochs": int, "seed": int})

    data = dict(_take(d, "config", "data") or {})
    data_dir = _take(data, "data", "dir", required=True)
    train_subset = _take(data, "data", "train_subset")
    stratified = bool(_take(data, "data", "stratified", True))
    _no_leftovers(data, "data")

    run = dict(_take(d, "config", "run") or {})
    mode = _take(run, "run", "mode", "crnn-ep")
    if mode not in MODES:
        _fail("run.mode", f"must be one of {MODES}, got {mode!r}")
    out = _take(run, "run", "out")
    seed = int(_take(run, "run", "seed", ep.seed))
    workers = int(_take(run, "run", "workers", 1))
    if workers < 1:
        _fail("run.workers", f"must be >= 1, got {workers}")
    _no_leftovers(run, "run")

    gradcheck = dict(_take(d, "config", "gradcheck") or {})
    probe = dict(_take(d, "config", "probe") or {})
    _no_leftovers(d, "config")

    if out is None:
        out = os.environ.get("EPCONV_OUT", "out")
    return RunConfig(
        network=network, dynamics=dynamics, spiking=spiking, ep=ep,
        data_dir=Path(data_dir), train_subset=train_subset,
        stratified=stratified, mode=mode, out=Path(out), seed=seed,
        workers=workers, gradcheck=gradcheck, probe=probe, raw=raw,
    )


def _load_train_data(cfg: RunConfig):
    if not cfg.data_dir.exists():
        _fail("data.dir", f"directory {cfg.data_dir} does not exist")
    x, y = load_split(cfg.data_dir, "train")
    if cfg.train_subset is not None:
        x, y = subset(x, y, int(cfg.train_subset),
                      substream(cfg.seed, "subset"), stratified=cfg.stratified)
    return x, y


def _dump_resolved(cfg: RunConfig, out: Path):
    resolved = dict(cfg.raw)
    resolved.setdefault("run", {})
    resolved["run"] = dict(resolved["run"], mode=cfg.mode,
                           out=str(cfg.out), seed=cfg.seed, workers=cfg.workers)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(
        yaml.safe_dump(resolved, sort_keys=False))


# ---- subcommands ----


def cmd_train(cfg: RunConfig) -> int:
    geo = cfg.network.resolve()
    train_x, train_y = _load_train_data(cfg)
    test_x, test_y = load_split(cfg.data_dir, "test")
    ecfg = cfg.ep if cfg.ep.seed == cfg.seed else _reseed(cfg.ep, cfg.seed)
    params = init_parameters(geo, substream(cfg.seed, "init"))
    _dump_resolved(cfg, cfg.out)
    scfg = cfg.spiking if cfg.neuron_model == "snn" else None

    if cfg.trainer == "ep":
        fit(params, geo, cfg.dynamics, ecfg, train_x, train_y, test_x, test_y,
            scfg=scfg, mode=cfg.neuron_model, out_dir=cfg.out,
            log=lambda m: print(m, flush=True))
    else:
        _fit_bptt(params, geo, cfg, ecfg, train_x, train_y, test_x, test_y)
    return 0


def _reseed(ecfg: EPConfig, seed: int) -> EPConfig:
    from dataclasses import replace
    return replace(ecfg, seed=seed)


def _fit_bptt(params, geo, cfg: RunConfig, ecfg, train_x, train_y, test_x, test_y):
    """Plain unrolled-gradient training loop, mirroring fit()'s artifacts."""
    from epconv.data import batches
    from epconv.oracle import bptt_gradients

    scfg = cfg.spiking if cfg.neuron_model == "snn" else None
    dtype = params.weights[0].dtype
    rates = [ecfg.rate_for(k, geo.n_layers) for k in range(geo.n_layers)]
    with open(cfg.out / "metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=(
            "epoch", "train_loss", "test_loss", "test_error"))
        writer.writeheader()
        for epoch in range(ecfg.epochs):
            rng = substream(ecfg.seed, "shuffle", epoch)
            loss_sum, seen = 0.0, 0
            for xb, yb in batches(train_x, train_y, ecfg.batch_size, seed=rng):
                x = np.asarray(xb, dtype=dtype)
                t = onehot(yb, geo.output_size)
                grads, info = bptt_gradients(
                    params, x, t, geo, cfg.dynamics, loss=ecfg.loss,
                    mode=cfg.neuron_model, scfg=scfg, with_info=True)
                sgd_update(params, grads, rates)
                loss_sum += info["loss"] * len(xb)
                seen += len(xb)
            err, tloss = evaluate(params, test_x, test_y, geo, cfg.dynamics,
                                  ecfg, scfg, cfg.neuron_model)
            writer.writerow({"epoch": epoch, "train_loss": loss_sum / max(seen, 1),
                             "test_loss": tloss, "test_error": err})
            print(f"epoch {epoch}: test_error {err:.4f}", flush=True)
            save_checkpoint(cfg.out / "checkpoint.bin", params,
                            epoch=epoch, seed=ecfg.seed)


def cmd_eval(cfg: RunConfig, checkpoint_path) -> int:
    geo = cfg.network.resolve()
    params, meta = load_checkpoint(checkpoint_path)
    expect = [g.weight_shape for g in geo.layers]
    got = [w.shape for w in params.weights]
    if expect != got:
        raise RunConfigError(
            f"checkpoint does not match network: config wants layer shapes "
            f"{expect}, checkpoint holds {got}")
    test_x, test_y = load_split(cfg.data_dir, "test")
    scfg = cfg.spiking if cfg.neuron_model == "snn" else None
    err, loss = evaluate(params, test_x, test_y, geo, cfg.dynamics, cfg.ep,
                         scfg, cfg.neuron_model)
    print(f"test_error {err:.4f} test_loss {loss:.6f} "
          f"(checkpoint epoch {meta['epoch']})")
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "eval.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("checkpoint", "epoch", "test_error", "test_loss"))
        w.writerow((str(checkpoint_path), meta["epoch"], err, loss))
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    from epconv.oracle import (bptt_gradients, compare_gradients,
                               finite_diff_gradients)
    from epconv.training import train_batch

    gc = dict(cfg.gradcheck)
    nets = int(gc.pop("nets", 5))
    betas = [float(b) for b in gc.pop("betas", (1e-2, 1e-3))]
    samples = int(gc.pop("samples", 2))
    fd_step = float(gc.pop("fd_step", 1e-5))
    cos_min = float(gc.pop("cosine_min", 0.99))
    rel_max = float(gc.pop("rel_max", 0.1))
    fd_rel_max = float(gc.pop("fd_rel_max", 1e-4))
    _no_leftovers(gc, "gradcheck")
    if any(b <= 0 for b in betas):
        _fail("gradcheck.betas", "beta values must be positive")

    geo = cfg.network.resolve()
    dcfg = cfg.dynamics
    rows = []
    failures = 0

    def one_net(i):
        rng = substream(cfg.seed, "gradcheck", i)
        params = init_parameters(geo, rng, dtype=np.float64)
        for b in params.biases:
            b[...] = rng.uniform(-0.3, 0.3, b.shape)
        x = rng.uniform(0.1, 0.9, (samples, *cfg.network.input_shape))
        target = onehot(rng.integers(0, geo.output_size, samples),
                        geo.output_size)
        out = []
        bptt = bptt_gradients(params, x, target, geo, dcfg, loss=cfg.ep.loss)
        fd = finite_diff_gradients(params, x, target, geo, dcfg,
                                   loss=cfg.ep.loss, h=fd_step)
        cmp_fd = compare_gradients(fd, bptt)
        for li, layer in enumerate(cmp_fd["layers"]):
            out.append((i, "", "fd-vs-bptt", li, layer["cosine"], layer["rel"],
                        layer["rel"] <= fd_rel_max))
        for beta in betas:
            from dataclasses import replace
            ecfg = replace(cfg.ep, beta=beta, seed=cfg.seed)
            grads, _ = train_batch(params, x, target, geo, dcfg, ecfg,
                                   None, "crnn")
            cmp_ep = compare_gradients(grads, bptt)
            for li, layer in enumerate(cmp_ep["layers"]):
                ok = layer["cosine"] >= cos_min and layer["rel"] <= rel_max
                out.append((i, beta, "ep-vs-bptt", li,
                            layer["cosine"], layer["rel"], ok))
        return out

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            for chunk in pool.map(one_net, range(nets)):
                rows.extend(chunk)
    else:
        for i in range(nets):
            rows.extend(one_net(i))

    smallest = min(betas)
    for net, beta, pair, layer, cos, rel, ok in rows:
        gate = pair == "fd-vs-bptt" or beta == smallest
        if gate and not ok:
            failures += 1

    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "gradcheck.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("net", "beta", "pair", "layer", "cosine", "rel", "ok"))
        for row in rows:
            w.writerow(row)
    print(f"gradcheck: {len(rows)} comparisons, {failures} over threshold")
    return 1 if failures else 0


def cmd_probe(cfg: RunConfig) -> int:
    from epconv.diagnostics import imbalance_ratio, probe_routes

    pr = dict(cfg.probe)
    modes = [str(m) for m in pr.pop("modes", ("snn-max", "snn-avg", "crnn-max"))]
    samples = int(pr.pop("samples", 200))
    _no_leftovers(pr, "probe")
    parsed = []
    for m in modes:
        neuron, dash, kind = m.partition("-")
        if neuron not in ("snn", "crnn") or kind not in ("max", "avg"):
            _fail("probe.modes",
                  f"entries look like 'snn-max' or 'crnn-avg', got {m!r}")
        parsed.append((neuron, kind))

    geo = cfg.network.resolve()
    if geo.n_conv < 2:
        _fail("network.layers", "route probe needs at least 2 conv layers")
    x, y = _load_train_data(cfg)
    x, y = subset(x, y, min(samples, len(x)), substream(cfg.seed, "probe"),
                  stratified=cfg.stratified)
    params = init_parameters(geo, substream(cfg.seed, "init"))
    cfg.out.mkdir(parents=True, exist_ok=True)

    def one_mode(pair):
        neuron, kind = pair
        stats = probe_routes(params, x, y, cfg.network, cfg.dynamics, cfg.ep,
                             scfg=cfg.spiking if neuron == "snn" else None,
                             mode=neuron, pooling_kind=kind)
        stats.to_csv(cfg.out / f"probe_{neuron}_{kind}.csv")
        return pair, imbalance_ratio(stats)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(one_mode, parsed))
    else:
        results = [one_mode(p) for p in parsed]
    for (neuron, kind), ratios in results:
        pretty = ", ".join(f"{r:.3g}" for r in ratios)
        print(f"{neuron}+{kind}: imbalance per layer [{pretty}]")
    return 0


# ---- entry point ----


def build_parser():
    p = argparse.ArgumentParser(
        prog="epconv",
        description="Contrastive training for convergent (spiking) conv nets")
    sub = p.add_subparsers(dest="command", required=True)
    for name, needs_ckpt in (("train", False), ("eval", True),
                             ("gradcheck", False), ("probe", False)):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--checkpoint", required=needs_ckpt)
        s.add_argument("--out", help="output directory (default: run.out, "
                       "then $EPCONV_OUT, then ./out)")
        s.add_argument("--seed", type=int, help="override config seed")
        s.add_argument("--workers", type=int, help="override parallelism")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.ep = _reseed(cfg.ep, args.seed)
        if args.out is not None:
            cfg.out = Path(args.out)
        if args.workers is not None:
            if args.workers < 1:
                raise RunConfigError("run.workers: must be >= 1")
            cfg.workers = args.workers
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return cmd_probe(cfg)
    except (RunConfigError, ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
