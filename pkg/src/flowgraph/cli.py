"""Command-line entry point for the retrieval pipeline.

Subcommands: gen, train, retrieve, eval, oracle, gradcheck,
baseline-dense. Every run writes a run_manifest.json next to its outputs;
all randomness flows from --seed (falling back to the FLOWGRAPH_SEED
environment variable, then 0). A --config file of flat key=value lines
provides flag defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

from .encoder import EncoderConfig, dense_retrieve, embed, cosine
from .kg import load_graph, load_queries, save_graph, save_queries
from .metrics import evaluate
from .model import (HiddenSpec, grad_check, init_model, load_checkpoint,
                    save_checkpoint)
from .objectives import dble_loss, prm_loss, sft_loss, subtb_loss, tb_loss
from .oracle import (distribution_distance, enumerate_trajectories,
                     exact_flows, save_oracle_dump, BudgetExceededError)
from .sampler import load_results, rerank, retrieve, save_results
from .synth import SynthConfig, fixture_suite, generate, save_manifest
from .trainer import (OBJECTIVES, TrainConfig, collect_trajectories,
                      expand_local_exploration, featurize_trajectory,
                      make_preference_pairs, train)
from .mdp import RewardSpec, BINARY_REWARD


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("FLOWGRAPH_SEED")
    return int(env) if env else 0


def _read_config_file(path: str) -> dict:
    """Flat key=value lines; '#' starts a comment; values parsed as JSON
    scalars when possible, else kept as strings."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                out[key] = value
    return out


def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _write_run_manifest(out_dir: str, command: str, config: dict,
                        inputs: list[str], outputs: list[str],
                        seed: int, started: float) -> None:
    manifest = {
        "command": command,
        # args carry the dispatch callback under "func"; drop it.
        "config": {k: v for k, v in config.items() if k != "func"},
        "inputs": sorted(inputs),
        "outputs": {p: _digest(p) for p in sorted(outputs)},
        "seed": seed,
        "wall_time_s": time.time() - started,
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_reward_spec(path: str | None) -> RewardSpec:
    if path is None:
        return BINARY_REWARD
    with open(path, encoding="utf-8") as fh:
        table = json.load(fh)
    return RewardSpec(mode="table",
                      table=tuple(sorted(table.items())))


def _cmd_gen(args) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed)
    cfg = SynthConfig(num_queries=args.num_queries,
                      depth_cutoff=args.depth_cutoff, seed=seed)
    graph, queries, manifest = generate(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    gpath = os.path.join(args.out_dir, "graph.jsonl")
    qpath = os.path.join(args.out_dir, "queries.jsonl")
    mpath = os.path.join(args.out_dir, "manifest.json")
    save_graph(graph, gpath)
    save_queries(queries, qpath)
    save_manifest(manifest, mpath)
    _write_run_manifest(args.out_dir, "gen", vars(args), [],
                        [gpath, qpath, mpath], seed, started)
    print(f"generated {graph.num_nodes} nodes, {graph.num_edges} edges, "
          f"{len(queries)} queries -> {args.out_dir}")
    return 0


def _cmd_train(args) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed)
    graph = load_graph(args.graph)
    queries = load_queries(args.queries, graph)
    cfg = TrainConfig(
        objective=args.objective, num_exploration=args.num_exploration,
        depth_cutoff=args.depth_cutoff, batch_size=args.batch_size,
        accumulation_steps=args.accumulation, lr=args.lr,
        epochs=args.n_epochs, max_steps=args.max_steps,
        eval_ratio=args.eval_ratio, eval_step=args.eval_step,
        boundary_const=args.boundary_const, reward_floor=args.reward_floor,
        seed=seed,
        encoder=EncoderConfig(dim=args.dim, doc_cutoff=args.doc_cutoff,
                              window_size=args.window_size,
                              depth_cutoff=args.depth_cutoff))
    reward_spec = _load_reward_spec(args.reward_table)
    result = train(graph, queries, cfg, reward_spec=reward_spec)
    os.makedirs(args.out_dir, exist_ok=True)
    cpath = os.path.join(args.out_dir, "checkpoint.json")
    lpath = os.path.join(args.out_dir, "train_log.csv")
    save_checkpoint(result.model, cpath,
                    train_config_digest=result.config_digest)
    result.log.to_csv(lpath)
    _write_run_manifest(args.out_dir, "train", vars(args),
                        [args.graph, args.queries], [cpath, lpath],
                        seed, started)
    print(f"trained objective={args.objective} "
          f"final_loss={result.log.final_total_loss:.6g} "
          f"trajectories={len(result.collection.trajectories)} "
          f"skipped={len(result.collection.skipped)}")
    return 0


def _cmd_retrieve(args) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed)
    graph = load_graph(args.graph)
    queries = load_queries(args.queries, graph)
    model = load_checkpoint(args.checkpoint)
    cfg = model.encoder_cfg

    def one(query):
        res = retrieve(model, graph, query, n=args.n, cfg=cfg,
                       global_seed=seed, temperature=args.temperature)
        if args.rerank == "on":
            res = rerank(model, res, graph, cfg)
        return res

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(one, list(queries)))
    else:
        results = [one(q) for q in queries]
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_results(results, args.out)
    _write_run_manifest(os.path.dirname(os.path.abspath(args.out)),
                        "retrieve", vars(args),
                        [args.graph, args.queries, args.checkpoint],
                        [args.out], seed, started)
    print(f"retrieved {len(results)} queries x {args.n} samples -> "
          f"{args.out}")
    return 0


def _cmd_eval(args) -> int:
    started = time.time()
    graph = load_graph(args.graph)
    queries = load_queries(args.queries, graph)
    rows = load_results(args.results)
    report = evaluate(rows, queries)
    jpath = args.out_prefix + ".json"
    cpath = args.out_prefix + ".csv"
    os.makedirs(os.path.dirname(os.path.abspath(jpath)), exist_ok=True)
    report.to_json(jpath)
    report.to_csv(cpath)
    _write_run_manifest(os.path.dirname(os.path.abspath(jpath)), "eval",
                        vars(args), [args.results, args.queries],
                        [jpath, cpath], _resolve_seed(args.seed), started)
    overall = report.aggregates["overall"]
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(overall.items())))
    return 0


def _cmd_oracle(args) -> int:
    started = time.time()
    graph = load_graph(args.graph)
    queries = load_queries(args.queries, graph)
    query = queries.by_qid(args.qid) if args.qid else queries[0]
    cfg = EncoderConfig()
    from .encoder import seed_nodes
    seed_node = args.seed_node or seed_nodes(query.text, graph, 1, cfg)[0]
    reward_spec = _load_reward_spec(args.reward_table)
    enum = enumerate_trajectories(graph, query, seed_node,
                                  args.depth_cutoff, reward_spec,
                                  node_budget=args.budget)
    table = exact_flows(enum)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_oracle_dump(table, args.out)
    msg = (f"oracle qid={query.qid} trajectories={len(enum)} "
           f"Z={table.partition:.6g}")
    if args.results:
        rows = [r for r in load_results(args.results)
                if r["qid"] == query.qid]
        if not rows:
            raise ValueError(f"no results for qid {query.qid!r} in "
                             f"{args.results}")
        terminals = rows[0]["sample_terminals"]
        freq = {}
        for t in terminals:
            freq[t] = freq.get(t, 0) + 1 / len(terminals)
        tv, l1 = distribution_distance(freq, table)
        msg += f" tv={tv:.4f} l1={l1:.4f}"
    _write_run_manifest(os.path.dirname(os.path.abspath(args.out)),
                        "oracle", vars(args), [args.graph, args.queries],
                        [args.out], _resolve_seed(args.seed), started)
    print(msg)
    return 0


def _cmd_gradcheck(args) -> int:
    from .mdp import BINARY_REWARD
    suite = fixture_suite()
    if args.fixture not in suite:
        raise ValueError(f"unknown fixture {args.fixture!r}; options: "
                         f"{sorted(suite)}")
    fixture = suite[args.fixture]
    seed = _resolve_seed(args.seed)
    cfg = TrainConfig(objective=args.objective, seed=seed,
                      depth_cutoff=fixture.depth_cutoff,
                      encoder=EncoderConfig(
                          dim=args.dim, depth_cutoff=fixture.depth_cutoff))
    collection = collect_trajectories(graph=fixture.graph,
                                      queries=fixture.queries, cfg=cfg,
                                      reward_spec=fixture.reward_spec)
    traj = collection.trajectories[0]
    targets = fixture.query.targets
    model = init_model(cfg.encoder, HiddenSpec(), seed=seed)
    if args.objective in ("dble", "sft"):
        batches = expand_local_exploration(
            fixture.graph, traj, cfg.num_exploration, seed, cfg=cfg,
            targets=targets, reward_spec=fixture.reward_spec)
        item = batches[0]
        loss_fn = {"dble": lambda m: dble_loss(m, item, cfg.boundary_const),
                   "sft": lambda m: sft_loss(m, item)}[args.objective]
    elif args.objective == "prm":
        batches = expand_local_exploration(
            fixture.graph, traj, cfg.num_exploration, seed, cfg=cfg,
            targets=targets, reward_spec=fixture.reward_spec)
        pairs = make_preference_pairs(batches)
        if not pairs:
            raise ValueError("fixture yields no preference pairs")
        pair = pairs[0]
        loss_fn = lambda m: prm_loss(m, pair)
    else:
        tf = featurize_trajectory(fixture.graph, traj, cfg=cfg,
                                  targets=targets,
                                  reward_spec=fixture.reward_spec)
        if args.objective == "tb":
            loss_fn = lambda m: tb_loss(m, tf)
        else:
            j = tf.num_steps
            loss_fn = lambda m: subtb_loss(m, tf, 0, j, cfg.boundary_const)
    err = grad_check(model, loss_fn, num_params=args.num_params,
                     seed=seed, check_log_z=(args.objective == "tb"))
    print(f"gradcheck fixture={args.fixture} objective={args.objective} "
          f"max_rel_err={err:.3e}")
    return 0 if err <= args.tolerance else 1


def _cmd_baseline_dense(args) -> int:
    started = time.time()
    graph = load_graph(args.graph)
    queries = load_queries(args.queries, graph)
    cfg = EncoderConfig(dim=args.dim)
    rows = []
    for q in queries:
        qvec = embed(q.text, cfg)
        top = dense_retrieve(q.text, graph, args.k, cfg)
        rows.append({
            "qid": q.qid,
            "ranked": [{"node": v,
                        "score": cosine(qvec, embed(graph.node_text(v), cfg)),
                        "count": 1} for v in top],
            "sample_terminals": top,
            "sample_paths": [[v] for v in top],
            "rerank_applied": False,
        })
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    _write_run_manifest(os.path.dirname(os.path.abspath(args.out)),
                        "baseline-dense", vars(args),
                        [args.graph, args.queries], [args.out],
                        _resolve_seed(args.seed), started)
    print(f"dense baseline: {len(rows)} queries -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowgraph",
        description="Flow-matching retrieval over text-attributed graphs.")
    parser.add_argument("--config", help="flat key=value defaults file")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="global seed (fallback: FLOWGRAPH_SEED, then 0)")

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-queries", type=int, default=60)
    p.add_argument("--depth_cutoff", type=int, default=6)
    common(p)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a retrieval policy")
    p.add_argument("--graph", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--objective", choices=OBJECTIVES, default="dble")
    p.add_argument("--num_exploration", type=int, default=4)
    p.add_argument("--depth_cutoff", type=int, default=6)
    p.add_argument("--doc_cutoff", type=int, default=400)
    p.add_argument("--window_size", type=int, default=3)
    p.add_argument("--batch_size", type=int, default=1)
    p.add_argument("--accumulation", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n_epochs", type=int, default=1)
    p.add_argument("--max_steps", type=int, default=None)
    p.add_argument("--eval_ratio", type=float, default=0.8)
    p.add_argument("--eval_step", type=int, default=100)
    p.add_argument("--boundary_const", type=float, default=0.0)
    p.add_argument("--reward_floor", type=float, default=1e-4)
    p.add_argument("--dim", type=int, default=1024)
    p.add_argument("--reward_table", default=None,
                   help="JSON file mapping node id -> reward value")
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("retrieve", help="sample ranked results")
    p.add_argument("--graph", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--rerank", choices=("on", "off"), default="off")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("eval", help="score a results file")
    p.add_argument("--graph", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("oracle", help="exact enumeration ground truth")
    p.add_argument("--graph", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qid", default=None)
    p.add_argument("--seed-node", default=None)
    p.add_argument("--depth_cutoff", type=int, default=6)
    p.add_argument("--budget", type=int, default=100_000)
    p.add_argument("--out", required=True)
    p.add_argument("--results", default=None,
                   help="results file to compare against the oracle")
    p.add_argument("--reward_table", default=None)
    common(p)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--fixture", default="chain-3")
    p.add_argument("--objective", choices=OBJECTIVES, default="dble")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--num_params", type=int, default=120)
    p.add_argument("--tolerance", type=float, default=1e-4)
    common(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("baseline-dense", help="similarity-only baseline")
    p.add_argument("--graph", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--dim", type=int, default=1024)
    common(p)
    p.set_defaults(func=_cmd_baseline_dense)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    # First pass just to find --config; its values become flag defaults.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        defaults = _read_config_file(known.config)
        for action in parser._subparsers._group_actions[0].choices.values():
            valid = {a.dest for a in action._actions}
            action.set_defaults(**{k: v for k, v in defaults.items()
                                   if k in valid})
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except BudgetExceededError as exc:
        print(json.dumps({"error": "budget_exceeded", "message": str(exc)}),
              file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
