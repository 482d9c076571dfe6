"""Command-line pipeline: gen-data -> train-inverse -> label -> pretrain -> bc/probe/embed -> report.

Every stage works inside one run directory (``--out``). The directory holds
the run's ``config.txt``, binary artifacts, the append-only ``metrics.txt``
stream and ``results.tsv`` consumed by ``report``. Failures print a single
``error code=<name> detail=<text>`` line and exit nonzero.
"""
from __future__ import annotations

import argparse
import glob
import os
import sys
from collections import OrderedDict

import numpy as np

from . import downstream as ds
from . import experiments as ex
from . import flowlab as fl
from . import formats as fm
from . import gradcheck
from . import nets
from . import synthworld as sw
from .config import Config, ConfigError, load, paper_scale
from .numcore import ParamSet, Tensor
from .pretrain import MODES, pretrain_run

U64_MAX = 2**64 - 1
GRADCHECK_TOL = 1e-4


class CliError(Exception):
    def __init__(self, code: str, detail: str):
        super().__init__(detail)
        self.code = code
        self.detail = detail


# --- run directory ----------------------------------------------------------------------

class Run:
    """Paths, configuration and output streams of one run directory."""

    def __init__(self, out: str, cfg: Config):
        self.out = out
        self.cfg = cfg

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def emit(self, step: int, key: str, value: float) -> None:
        with open(self.path("metrics.txt"), "a", encoding="utf-8") as fh:
            fh.write(f"step={step} key={key} value={float(value)!r}\n")

    def emit_many(self, records) -> None:
        lines = [f"step={s} key={k} value={float(v)!r}\n" for s, k, v in records]
        with open(self.path("metrics.txt"), "a", encoding="utf-8") as fh:
            fh.writelines(lines)

    def need(self, name: str) -> str:
        p = self.path(name)
        if not os.path.exists(p):
            raise CliError("missing_input", f"{p} not found")
        return p

    def provenance(self, mode: str, seed: int, stage: str) -> dict:
        return {"stage": stage, "mode": mode, "seed": seed,
                "config_digest": self.cfg.coupled_digest(), "full_digest": self.cfg.digest()}

    def check_provenance(self, ckpt: fm.Checkpoint, what: str) -> None:
        got = ckpt.provenance.get("config_digest")
        if got != self.cfg.coupled_digest():
            raise CliError("config_mismatch",
                           f"{what} was built with config digest {got}, "
                           f"this run uses {self.cfg.coupled_digest()}")


def open_run(args) -> Run:
    out = args.out
    os.makedirs(out, exist_ok=True)
    cfg_path = os.path.join(out, "config.txt")
    recorded = load(cfg_path) if os.path.exists(cfg_path) else None
    cfg = recorded or Config()
    if args.config:
        if not os.path.exists(args.config):
            raise CliError("missing_input", f"{args.config} not found")
        cfg = load(args.config, cfg)
    if args.paper_scale:
        cfg = paper_scale(cfg)
    cfg.validate()
    if recorded is not None and recorded.coupled_digest() != cfg.coupled_digest():
        drift = [k for k in ("epsilon", "kappa_max", "height", "width", "block", "search_radius",
                             "embed_dim") if getattr(recorded, k) != getattr(cfg, k)]
        raise CliError("config_mismatch", f"keys differ from {cfg_path}: {','.join(drift) or 'world'}")
    if recorded is None:
        fm.write_bytes(cfg_path, cfg.render().encode())
    return Run(out, cfg)


# --- packing helpers ------------------------------------------------------------------------

def pack_episodes(episodes: list[sw.Episode]) -> tuple[fm.FramePack, fm.LabelFile]:
    frames, steer, ids, ts = sw.stack(episodes)
    src = np.full(len(steer), fm.PSEUDO if episodes[0].source == sw.PSEUDO else fm.GROUND_TRUTH)
    return fm.FramePack(frames, ids, ts), fm.LabelFile(ids, ts, steer, src)


def unpack_episodes(pack: fm.FramePack, labels: fm.LabelFile) -> list[sw.Episode]:
    """Regroup per-frame records into episodes, checking the pairing."""
    if len(pack) != len(labels) or not (
            np.array_equal(pack.episode_ids, labels.episode_ids)
            and np.array_equal(pack.time_index, labels.time_index)):
        raise CliError("label_mismatch", "label records do not pair one-to-one with frames")
    episodes: list[sw.Episode] = []
    ids = pack.episode_ids
    cuts = np.flatnonzero(np.diff(ids) != 0) + 1
    for lo, hi in zip(np.concatenate([[0], cuts]), np.concatenate([cuts, [len(ids)]])):
        if hi - lo < 2 or np.any(pack.time_index[lo:hi] != np.arange(hi - lo)):
            raise CliError("label_mismatch", f"episode {ids[lo]} is not a contiguous run of >= 2 frames")
        source = sw.PSEUDO if labels.sources[lo] == fm.PSEUDO else sw.GROUND_TRUTH
        episodes.append(sw.Episode(int(ids[lo]), pack.frames[lo:hi], labels.actions[lo:hi],
                                   source=source))
    return episodes


def read_pool(run: Run, stem: str, labels: str | None = None) -> list[sw.Episode]:
    pack = fm.read_frames(run.need(f"{stem}.acof"))
    lab = fm.read_labels(run.need(labels or f"{stem}.acol"))
    return unpack_episodes(pack, lab)


def params_to_tensors(ps: ParamSet) -> dict[str, np.ndarray]:
    return OrderedDict((k, t.data) for k, t in ps.items())


def tensors_to_params(tensors: dict[str, np.ndarray]) -> ParamSet:
    return ParamSet((k, Tensor(np.array(v), requires_grad=False)) for k, v in tensors.items())


def _frac_key(f: float) -> str:
    return f"{f:g}"


# --- results table --------------------------------------------------------------------------

RESULT_HEADER = "kind\tmode\tfraction\tseed\tmetric\tvalue\n"


def record_results(run: Run, rows: list[tuple[str, str, str, int, str, float]]) -> None:
    """Upsert rows keyed by (kind, mode, fraction, seed, metric)."""
    path = run.path("results.tsv")
    table = OrderedDict()
    if os.path.exists(path):
        for row in _read_results(path):
            table[row[:5]] = row[5]
    for kind, mode, frac, seed, metric, value in rows:
        table[(kind, mode, frac, str(seed), metric)] = repr(float(value))
    body = "".join("\t".join((*k, v)) + "\n" for k, v in sorted(table.items()))
    fm.write_bytes(path, (RESULT_HEADER + body).encode())


def _read_results(path: str) -> list[tuple[str, ...]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if lineno == 0 or not line.strip():
                continue
            parts = tuple(line.rstrip("\n").split("\t"))
            if len(parts) != 6:
                raise CliError("bad_results", f"{path}:{lineno + 1}: expected 6 columns")
            rows.append(parts)
    return rows


def _frac_sort(f: str):
    try:
        return (0, float(f), f)
    except ValueError:
        return (1, 0.0, f)


def render_report(rows) -> str:
    """One table per (kind, metric): rows = mode, columns = fraction,
    cells = mean±std (population std) over seeds."""
    groups: dict[tuple[str, str], dict[tuple[str, str], list[float]]] = {}
    for kind, mode, frac, seed, metric, value in rows:
        groups.setdefault((kind, metric), {}).setdefault((mode, frac), []).append(float(value))
    out = []
    for (kind, metric) in sorted(groups):
        cells = groups[(kind, metric)]
        modes = sorted({m for m, _ in cells})
        fracs = sorted({f for _, f in cells}, key=_frac_sort)
        out.append(f"# {kind} {metric}")
        out.append("\t".join(["mode"] + fracs))
        for m in modes:
            line = [m]
            for f in fracs:
                v = cells.get((m, f))
                line.append("-" if v is None else f"{np.mean(v):.4f}±{np.std(v):.4f}")
            out.append("\t".join(line))
        out.append("")
    return "\n".join(out)


# --- stages -----------------------------------------------------------------------------------

def cmd_gen_data(run: Run, args) -> None:
    cfg = run.cfg
    for pool in ("inverse", "corpus", "bc"):
        eps = ex.generate_pool(pool, cfg, args.seed)
        pack, labels = pack_episodes(eps)
        fm.write_frames(run.path(f"{pool}.acof"), pack)
        fm.write_labels(run.path(f"{pool}.acol"), labels)
        run.emit(0, f"gen-data.{pool}.episodes", len(eps))
        run.emit(0, f"gen-data.{pool}.frames", len(pack))


def cmd_train_inverse(run: Run, args) -> None:
    cfg = run.cfg
    eps = read_pool(run, "inverse")
    train, test = sw.dataset_split(eps, cfg.train_fraction, args.seed)
    model = ex.fit_inverse(train, cfg, seed=args.seed)
    run.emit_many((i, f"train-inverse.{cfg.inverse_mode}.train_l1", v)
                  for i, v in enumerate(model.history))
    x, y, _ = fl.episode_pairs(test, model.mode, cfg.block, cfg.search_radius)
    test_l1 = fl.eval_inverse(model, x, y)
    run.emit(cfg.inverse_epochs, f"train-inverse.{cfg.inverse_mode}.test_l1", test_l1)
    prov = run.provenance(model.mode, args.seed, "train-inverse")
    prov.update(in_dim=model.in_dim, hidden=model.hidden)
    fm.write_checkpoint(run.path("inverse.acow"),
                        fm.Checkpoint(params_to_tensors(model.params), prov))
    record_results(run, [("inverse", model.mode, "-", args.seed, "test_l1", test_l1)])


def load_inverse(run: Run) -> fl.InverseModel:
    ck = fm.read_checkpoint(run.need("inverse.acow"))
    run.check_provenance(ck, "inverse.acow")
    p = ck.provenance
    try:
        model = fl.InverseModel(tensors_to_params(ck.tensors), p["mode"], int(p["in_dim"]),
                                int(p["hidden"]), run.cfg.block, run.cfg.search_radius)
    except (KeyError, TypeError, ValueError) as e:
        raise CliError("bad_checkpoint", f"inverse.acow provenance incomplete: {e}") from None
    if model.mode not in ("flow", "frames"):
        raise CliError("bad_checkpoint", f"inverse.acow has unknown mode {model.mode!r}")
    return model


def cmd_label(run: Run, args) -> None:
    model = load_inverse(run)
    pack = fm.read_frames(run.need("corpus.acof"))
    gt = fm.read_labels(run.need("corpus.acol"))
    episodes = unpack_episodes(pack, gt)
    try:
        pseudo = np.concatenate([fl.pseudo_label_array(ep.frames, model) for ep in episodes])
    except ValueError as e:  # frame size inconsistent with the stored predictor
        raise CliError("bad_checkpoint", str(e)) from None
    fm.write_labels(run.path("corpus_pseudo.acol"),
                    fm.LabelFile(pack.episode_ids, pack.time_index, pseudo,
                                 np.full(len(pseudo), fm.PSEUDO)))
    run.emit(0, "label.frames", len(pseudo))
    run.emit(0, "label.l1_vs_ground_truth", float(np.mean(np.abs(pseudo - gt.actions))))


def cmd_pretrain(run: Run, args) -> None:
    cfg = run.cfg
    mode = args.mode
    labels = "corpus.acol" if cfg.use_ground_truth_actions else "corpus_pseudo.acol"
    pack = fm.read_frames(run.need("corpus.acof"))
    actions = None
    if mode not in ("none", "autoencoder"):
        lab = fm.read_labels(run.need(labels))
        unpack_episodes(pack, lab)  # pairing check
        actions = lab.actions
    if pack.frames.shape[1:] != (cfg.height, cfg.width, 3):
        raise CliError("config_mismatch", f"corpus frames {pack.frames.shape[1:]} vs config")
    prefix = f"pretrain.{mode}.s{args.seed}."
    res = pretrain_run(pack.frames, actions, cfg, mode, seed=args.seed)
    run.emit_many((s, prefix + k, v) for s, k, v in res.metrics)
    if mode not in ("none", "autoencoder"):
        run.emit(len(res.metrics), prefix + "acp_skipped_total", res.acp_skipped)
    fm.write_checkpoint(run.path(f"pretrain_{mode}_s{args.seed}.acow"),
                        fm.Checkpoint(params_to_tensors(res.params),
                                      run.provenance(mode, args.seed, "pretrain")))


def load_encoders(run: Run, args) -> list[tuple[str, ParamSet]]:
    paths = args.checkpoint or sorted(glob.glob(run.path(f"pretrain_*_s{args.seed}.acow")))
    if not paths:
        raise CliError("missing_input", f"no pretrain checkpoints for seed {args.seed} in {run.out}")
    out = []
    for p in paths:
        if not os.path.exists(p):
            raise CliError("missing_input", f"{p} not found")
        ck = fm.read_checkpoint(p)
        run.check_provenance(ck, os.path.basename(p))
        mode = ck.provenance.get("mode")
        if mode not in MODES:
            raise CliError("bad_checkpoint", f"{p}: unknown mode {mode!r}")
        enc = ParamSet((k, Tensor(v)) for k, v in ck.tensors.items() if k.startswith("enc."))
        if "enc.fc.b" not in enc:
            raise CliError("bad_checkpoint", f"{p}: no encoder tensors")
        out.append((mode, enc))
    return out


def _bc_world(run: Run, args) -> ex.World:
    cfg = run.cfg
    pool = read_pool(run, "bc")
    train, test = sw.dataset_split(pool, cfg.train_fraction, args.seed)
    return ex.World(cfg, [], np.zeros(0), train, test, None, pool)


def cmd_bc(run: Run, args) -> None:
    world = _bc_world(run, args)
    rows = []
    for mode, enc in load_encoders(run, args):
        for frac in args.fractions:
            rep = ex.bc_report(enc, mode, world, frac, args.seed)
            key = f"bc.{mode}.f{_frac_key(frac)}.s{args.seed}."
            run.emit(0, key + "mae", rep.mae)
            run.emit(0, key + "success_rate", rep.success_rate)
            rows += [("bc", mode, _frac_key(frac), args.seed, "success_rate", rep.success_rate),
                     ("bc", mode, _frac_key(frac), args.seed, "mae", rep.mae)]
    record_results(run, rows)


def cmd_probe(run: Run, args) -> None:
    world = _bc_world(run, args)
    corpus = read_pool(run, "corpus")
    world.corpus = corpus
    rows = []
    for mode, enc in load_encoders(run, args):
        res = ex.probe_report(enc, world, args.seed)
        run.emit(0, f"probe.{mode}.s{args.seed}.mae", res.mae)
        rows.append(("probe", mode, "-", args.seed, "mae", res.mae))
    record_results(run, rows)


def cmd_embed(run: Run, args) -> None:
    world = _bc_world(run, args)
    frames, actions = ex.eval_set(world, args.seed)
    buckets = ds.action_buckets(actions)
    rows = []
    for mode, enc in load_encoders(run, args):
        feats = nets.encode(enc, frames)
        agree = ds.nn_action_agreement(feats, actions, run.cfg.nn_k)
        coords = ds.pca_project(feats, 2)
        lines = ["pc1\tpc2\taction\tbucket\n"] + [
            f"{c[0]!r}\t{c[1]!r}\t{a!r}\t{int(b)}\n" for c, a, b in zip(coords, actions, buckets)]
        fm.write_bytes(run.path(f"embed_{mode}_s{args.seed}.tsv"), "".join(lines).encode())
        run.emit(0, f"embed.{mode}.s{args.seed}.nn_agreement", agree)
        rows.append(("embed", mode, "-", args.seed, "nn_agreement", agree))
    record_results(run, rows)


def cmd_gradcheck(run: Run, args) -> None:
    worst = []
    for i, (name, err, _) in enumerate(gradcheck.run_suite(points=args.points, seed=args.seed)):
        run.emit(i, f"gradcheck.{name}", err)
        if not err < GRADCHECK_TOL:
            worst.append(f"{name}={err:.3g}")
    if worst:
        raise CliError("gradcheck_failed", " ".join(worst))


def cmd_report(run: Run, args) -> None:
    path = run.path("results.tsv")
    rows = _read_results(path) if os.path.exists(path) else []
    rows = [r for r in rows if r[0] in ("bc", "probe", "embed", "inverse")]
    if not rows:
        raise CliError("no_runs", f"no results recorded in {run.out}")
    text = render_report(rows)
    fm.write_bytes(run.path("report.txt"), text.encode())
    sys.stdout.write(text)


COMMANDS = {
    "gen-data": cmd_gen_data, "train-inverse": cmd_train_inverse, "label": cmd_label,
    "pretrain": cmd_pretrain, "bc": cmd_bc, "probe": cmd_probe, "embed": cmd_embed,
    "gradcheck": cmd_gradcheck, "report": cmd_report,
}


# --- argument parsing --------------------------------------------------------------------------

def _u64(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed outside u64: {text}")
    return v


def _fractions(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("fractions must lie in (0, 1]")
    return vals


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=_u64, default=0)
    common.add_argument("--out", default="run", help="run directory")
    common.add_argument("--paper-scale", action="store_true",
                        help="use the full-size pretraining and downstream hyper-parameters")

    p = _Parser(prog="aco", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "pretrain":
            sp.add_argument("--mode", choices=MODES, default="aco")
        if name in ("bc", "probe", "embed"):
            sp.add_argument("--checkpoint", action="append",
                            help="pretrain checkpoint (repeatable); default: all in --out")
        if name == "bc":
            sp.add_argument("--fractions", type=_fractions, default=list(ex.FRACTIONS))
        if name == "gradcheck":
            sp.add_argument("--points", type=int, default=100)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        run = open_run(args)
        COMMANDS[args.command](run, args)
        return 0
    except CliError as e:
        code, detail = e.code, e.detail
    except (fm.FormatError, ConfigError) as e:
        code, detail = e.code, e.detail
    except FileNotFoundError as e:
        code, detail = "missing_input", str(e)
    except ValueError as e:
        code, detail = "invalid_input", str(e)
    detail = " ".join(str(detail).split())
    print(f"error code={code} detail={detail}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
