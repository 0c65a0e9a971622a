"""Command-line entry point.

Subcommands: grad-check, nl-equiv, flops-report, search, derive, train,
eval. Every command prints a JSON CommandResult {"status", "payload"} to
stdout and exits 0 on success, 1 on any failed check or error. Output
files are written atomically (write-then-rename).
"""

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import cost, data, nas_search, supernet, train, verify


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _emit(status, payload):
    print(json.dumps({"status": status, "payload": payload}, sort_keys=True,
                     default=str))
    return 0 if status == "ok" else 1


def _load_config(args):
    cfg = {}
    if args.config:
        with open(args.config) as f:
            cfg = json.load(f)
    return cfg


def _dataset_pair(data_cfg, seed):
    """Return (train_ds, eval_ds, input_hw, input_channels, num_classes)."""
    kind = data_cfg.get("kind", "longrange")
    if kind == "longrange":
        size = int(data_cfg.get("size", 16))
        train_ds = data.gen_longrange(seed=seed, count=int(data_cfg.get("count", 2048)),
                                      size=size)
        eval_ds = data.gen_longrange(seed=seed + 10_000,
                                     count=int(data_cfg.get("eval_count", 512)),
                                     size=size)
        return train_ds, eval_ds, (size, size), 1, 2
    if kind == "mnist":
        train_ds = data.load_mnist(data_cfg["train_images"], data_cfg["train_labels"],
                                   split="train")
        eval_ds = data.load_mnist(data_cfg["test_images"], data_cfg["test_labels"],
                                  split="test")
    elif kind == "digits":
        outdir = data_cfg.get("dir", ".")
        marker = os.path.join(outdir, "train-images-idx3-ubyte")
        if not os.path.exists(marker):
            data.make_digits_idx(outdir, seed=int(data_cfg.get("seed", 0)),
                                 train_count=int(data_cfg.get("train_count", 12000)),
                                 test_count=int(data_cfg.get("test_count", 2000)))
        train_ds = data.load_mnist(os.path.join(outdir, "train-images-idx3-ubyte"),
                                   os.path.join(outdir, "train-labels-idx1-ubyte"),
                                   split="train")
        eval_ds = data.load_mnist(os.path.join(outdir, "test-images-idx3-ubyte"),
                                  os.path.join(outdir, "test-labels-idx1-ubyte"),
                                  split="test")
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    h, w = train_ds.images.shape[1:3]
    return train_ds, eval_ds, (h, w), train_ds.images.shape[3], 10


def _train_config(cfg, args, mode):
    tc = train.TrainConfig(
        epochs=int(cfg.get("epochs", 3)),
        batch_size=int(cfg.get("batch_size", 64)),
        lr=float(cfg.get("lr", 0.05)),
        lr_decay=float(cfg.get("lr_decay", 0.97)),
        momentum=float(cfg.get("momentum", 0.9)),
        lam=float(cfg.get("lambda", 0.0)),
        seed=args.seed,
        mode=mode,
        threshold_lr_mult=float(cfg.get("threshold_lr_mult", 10.0)),
        clip_grad_norm=float(cfg.get("clip_grad_norm", 10.0)),
    )
    if getattr(args, "epochs", None) is not None:
        tc.epochs = args.epochs
    if getattr(args, "lam", None) is not None:
        tc.lam = args.lam
    return tc


def cmd_grad_check(args):
    payload = verify.run_grad_suite(seed=args.seed)
    return _emit("ok" if payload["passed"] else "fail", payload)


def cmd_nl_equiv(args):
    payload = verify.run_equiv_suite(seed=args.seed)
    return _emit("ok" if payload["passed"] else "fail", payload)


def _report_csv(rows, fieldnames):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def cmd_flops_report(args):
    try:
        if args.arch:
            with open(args.arch) as f:
                arch = nas_search.ArchDescription.from_json(f.read())
            if not arch.backbone:
                raise ValueError("architecture file carries no backbone spec")
            nspec = supernet.NetworkSpec.from_dict(arch.backbone)
            report = supernet.network_flops_report(nspec, arch)
            payload = report.to_dict()
            csv_rows = payload["entries"] + [{"site": "total", "kind": "",
                                              "madds": payload["total"]}]
            csv_fields = ["site", "kind", "madds"]
        else:
            if args.shapes:
                with open(args.shapes) as f:
                    doc = json.load(f)
                shapes = [(s["h"], s["w"], s["c"]) for s in doc["sites"]]
            else:
                shapes = None
            payload = cost.table1_ladder(shapes)
            payload["ladder"] = [{"variant": v, "madds": m}
                                 for v, m in payload["ladder"]]
            csv_rows = payload["ladder"]
            csv_fields = ["variant", "madds"]
    except (OSError, ValueError, KeyError, nas_search.ConfigError) as exc:
        return _emit("fail", {"error": str(exc)})
    if args.out:
        if args.format == "csv":
            _atomic_write(args.out, _report_csv(csv_rows, csv_fields))
        else:
            _atomic_write(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return _emit("ok", payload)


def _state_snapshot(state, nspec, meta):
    locations = []
    for sid in sorted(state.locations):
        loc = state.locations[sid]
        locations.append({
            "site": sid,
            "wd_norm_sq": float(np.sum(loc.wd.data ** 2)),
            "t_insert": float(loc.t_insert.data),
            "t_channel": float(loc.t_channel.data),
            "t_spatial": float(loc.t_spatial.data),
            "ema_channel": [float(v) for v in loc.ema_channel]
            if loc.ema_channel is not None else None,
            "ema_spatial": [float(v) for v in loc.ema_spatial]
            if loc.ema_spatial is not None else None,
        })
    return {
        "tau": state.tau,
        "mu": state.mu,
        "lambda": state.lam,
        "cset": state.cset.to_dict(),
        "locations": locations,
        "backbone": nspec.to_dict(),
        "meta": meta,
    }


def derive_from_snapshot(doc):
    """Discrete architecture from a saved search-state snapshot (pure function)."""
    cset = nas_search.CandidateSet(
        channel_ratios=tuple(doc["cset"]["channel_ratios"]),
        spatial_strides=tuple(doc["cset"]["spatial_strides"]),
    )
    locs = []
    for entry in doc["locations"]:
        insert = entry["wd_norm_sq"] > entry["t_insert"]
        if not insert:
            locs.append(nas_search.ArchLocation(site=entry["site"], insert=False))
            continue
        if entry["ema_channel"] is None or entry["ema_spatial"] is None:
            raise nas_search.DerivationError(
                f"site {entry['site']}: EMA registers not populated")
        ci = nas_search.select_ratio(entry["ema_channel"], entry["t_channel"])
        si = nas_search.select_ratio(entry["ema_spatial"], entry["t_spatial"])
        locs.append(nas_search.ArchLocation(
            site=entry["site"], insert=True,
            channel_ratio=cset.channel_ratios[ci],
            spatial_stride=cset.spatial_strides[si]))
    return nas_search.ArchDescription(locations=locs,
                                      backbone=doc.get("backbone", {}),
                                      meta=doc.get("meta", {}))


def cmd_search(args):
    cfg = _load_config(args)
    outdir = args.out or "."
    os.makedirs(outdir, exist_ok=True)
    try:
        train_ds, eval_ds, hw, cin, classes = _dataset_pair(
            cfg.get("data", {}), args.seed)
        nspec = supernet.toy_spec(input_hw=hw, input_channels=cin,
                                  num_classes=classes)
        net = supernet.Network(nspec, mode="search", seed=args.seed)
        tc = _train_config(cfg, args, mode="search")
        state = nas_search.init_search_state(net.search_sites(), lam=tc.lam)
        history = train.train(net, train_ds, tc, search_state=state,
                              eval_dataset=eval_ds)
        meta = {"seed": args.seed, "lambda": tc.lam,
                "steps": tc.epochs * (len(train_ds) // tc.batch_size)}
        arch = nas_search.derive_architecture(state, backbone=nspec.to_dict(),
                                              meta=meta)
    except (train.DivergenceError, nas_search.DivergenceError) as exc:
        return _emit("fail", {"error": f"search diverged: {exc}"})
    except (OSError, ValueError, KeyError) as exc:
        return _emit("fail", {"error": str(exc)})

    arch_path = os.path.join(outdir, "arch.json")
    _atomic_write(arch_path, arch.to_json())
    state_path = os.path.join(outdir, "search_state.json")
    _atomic_write(state_path, json.dumps(_state_snapshot(state, nspec, meta),
                                         sort_keys=True, indent=2) + "\n")
    history_path = os.path.join(outdir, "history.csv")
    buf = io.StringIO()
    fields = train.HISTORY_FIELDS
    writer = csv.DictWriter(buf, fieldnames=fields)
    writer.writeheader()
    for row in history:
        writer.writerow({k: row.get(k) for k in fields})
    _atomic_write(history_path, buf.getvalue())

    derived_cost = supernet.network_flops_report(nspec, arch).total
    payload = {
        "arch_file": arch_path,
        "state_file": state_path,
        "history_file": history_path,
        "inserts": len(arch.inserted()),
        "derived_flops": derived_cost,
        "final": history[-1] if history else None,
    }
    return _emit("ok", payload)


def cmd_derive(args):
    try:
        with open(args.state) as f:
            doc = json.load(f)
        arch = derive_from_snapshot(doc)
    except (OSError, ValueError, KeyError, nas_search.DerivationError) as exc:
        return _emit("fail", {"error": str(exc)})
    if args.out:
        _atomic_write(args.out, arch.to_json())
    return _emit("ok", {"inserts": len(arch.inserted()),
                        "locations": json.loads(arch.to_json())["locations"]})


def _build_model(arch_arg, nspec, seed):
    if arch_arg in (None, "plain"):
        return supernet.Network(nspec, mode="plain", seed=seed), None
    if arch_arg == "manual":
        return supernet.Network(nspec, mode="lightnl", seed=seed), None
    with open(arch_arg) as f:
        arch = nas_search.ArchDescription.from_json(f.read())
    return supernet.Network(nspec, mode="realized", seed=seed, arch=arch), arch


def cmd_train(args):
    cfg = _load_config(args)
    try:
        train_ds, eval_ds, hw, cin, classes = _dataset_pair(
            cfg.get("data", {}), args.seed)
        nspec = supernet.toy_spec(input_hw=hw, input_channels=cin,
                                  num_classes=classes)
        model, _ = _build_model(args.arch, nspec, args.seed)
        tc = _train_config(cfg, args, mode=args.arch or "plain")
        ckpt = os.path.join(args.out, "model.ckpt") if args.out else None
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        history = train.train(model, train_ds, tc, eval_dataset=eval_ds,
                              checkpoint_path=ckpt)
    except train.DivergenceError as exc:
        return _emit("fail", {"error": str(exc)})
    except (OSError, ValueError, KeyError, supernet.SpecError,
            nas_search.ConfigError) as exc:
        return _emit("fail", {"error": str(exc)})
    if args.out:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=train.HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k) for k in train.HISTORY_FIELDS})
        _atomic_write(os.path.join(args.out, "history.csv"), buf.getvalue())
    final_eval = [r for r in history if r["split"] == "eval"]
    return _emit("ok", {"final": final_eval[-1] if final_eval else history[-1],
                        "flops": model.flops_report().total,
                        "checkpoint": ckpt})


def cmd_eval(args):
    cfg = _load_config(args)
    try:
        train_ds, eval_ds, hw, cin, classes = _dataset_pair(
            cfg.get("data", {}), args.seed)
        nspec = supernet.toy_spec(input_hw=hw, input_channels=cin,
                                  num_classes=classes)
        model, _ = _build_model(args.arch, nspec, args.seed)
        if args.checkpoint:
            train.load_checkpoint(model, args.checkpoint)
        metrics = train.evaluate(model, eval_ds)
    except (OSError, ValueError, KeyError, supernet.SpecError) as exc:
        return _emit("fail", {"error": str(exc)})
    return _emit("ok", metrics)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="lightnl",
        description="Lightweight non-local blocks: verification, cost reports, "
                    "search, training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--format", choices=["json", "csv"], default="json")

    p = sub.add_parser("grad-check", help="finite-difference checks for all ops")
    common(p)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("nl-equiv", help="associativity/reduction/reuse equivalence")
    common(p)
    p.set_defaults(fn=cmd_nl_equiv)

    p = sub.add_parser("flops-report", help="cost ladder or per-architecture report")
    common(p)
    p.add_argument("--shapes", help="JSON file with {'sites': [{'h','w','c'}]}")
    p.add_argument("--arch", help="architecture JSON (with embedded backbone)")
    p.set_defaults(fn=cmd_flops_report)

    p = sub.add_parser("search", help="run the differentiable search")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("derive", help="derive an architecture from a search state")
    common(p)
    p.add_argument("--state", required=True, help="search_state.json from a search run")
    p.set_defaults(fn=cmd_derive)

    p = sub.add_parser("train", help="train plain/manual/derived architectures")
    common(p)
    p.add_argument("--arch", default="plain",
                   help="'plain', 'manual', or an architecture JSON path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model")
    common(p)
    p.add_argument("--arch", default="plain")
    p.add_argument("--checkpoint")
    p.set_defaults(fn=cmd_eval)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
