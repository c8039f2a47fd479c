"""Batch command-line entry points: simulate, train, sample, assess, elicit, serve.

Table-like results are written twice, as a CSV for spreadsheets and a JSON
twin for programs; plots are never rendered here, only their data. Every
command is deterministic given --seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import elicitation as el
from . import oracle as orc
from . import scm
from . import training as tr
from . import policy as pol
from .errors import TrainingDivergedError
from .graphs import AncestralGraph, node_pairs, shd
from .scoring import GraphScorer, RewardSpec, log_reward

STRATEGY_ALIASES = {"ce": "cross_entropy", "cross_entropy": "cross_entropy",
                    "random": "random"}


@click.group()
def cli():
    """Sequential sampler over ancestral graphs: simulate, fit, inspect."""


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _load_scorer(data_path: str) -> GraphScorer:
    try:
        data = scm.Dataset.from_csv(Path(data_path).read_text())
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot load dataset: {exc}") from exc
    return GraphScorer(data)


def _load_checkpoint(path: str):
    try:
        params, meta = pol.load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise click.ClickException(f"cannot load checkpoint: {exc}") from exc
    if "reward_spec" not in meta:
        raise click.ClickException("checkpoint carries no reward spec")
    return params, RewardSpec.from_json_obj(meta["reward_spec"]), meta


# ---------------------------------------------------------------------------


@cli.command()
@click.option("--preset", type=click.Choice(sorted(scm.PRESET_NAMES)), default=None)
@click.option("--nodes", type=int, default=None, help="random structure size")
@click.option("--samples", type=int, default=500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--degree-max", type=int, default=4, show_default=True)
@click.option("--bidirected-rate", type=float, default=scm.DEFAULT_BIDIRECTED_RATE,
              show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def simulate(preset, nodes, samples, seed, degree_max, bidirected_rate, out):
    """Draw a linear-Gaussian dataset from a preset or random structure."""
    if (preset is None) == (nodes is None):
        raise click.UsageError("give exactly one of --preset / --nodes")
    if preset is not None:
        graph = scm.preset(preset)
    else:
        try:
            graph = scm.random_ancestral_structure(
                nodes, degree_max=degree_max, seed=seed,
                bidirected_rate=bidirected_rate)
        except (ValueError, RuntimeError) as exc:
            raise click.ClickException(str(exc)) from exc
    model = scm.random_parameters(graph, seed=seed)
    data = scm.sample_dataset(model, samples, seed=seed)
    out_path = Path(out)
    out_path.write_text(data.to_csv())
    meta = {
        "preset": preset, "nodes": graph.n, "samples": samples, "seed": seed,
        "true_graph": graph.to_json_obj(), "model": model.to_json_obj(),
    }
    _write_json(out_path.with_suffix(out_path.suffix + ".meta.json"), meta)
    click.echo(f"wrote {samples}x{graph.n} dataset to {out}")


@cli.command()
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--epochs", type=int, default=200, show_default=True)
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--batch", type=int, default=256, show_default=True)
@click.option("--temperature", type=float, default=1.0, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--embed-dim", type=int, default=pol.EMBED_DIM, show_default=True)
@click.option("--stop-loss", type=float, default=0.1, show_default=True)
@click.option("--patience", type=int, default=5, show_default=True)
@click.option("--calibration-samples", type=int, default=1000, show_default=True)
@click.option("--out-checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None)
def train(data, epochs, alpha, batch, temperature, lr, seed, embed_dim,
          stop_loss, patience, calibration_samples, out_checkpoint, log_path):
    """Fit the construction policy on a dataset."""
    scorer = _load_scorer(data)
    try:
        config = tr.TrainConfig(
            epochs=epochs, batch_size=batch, alpha=alpha, lr=lr, seed=seed,
            stop_loss=stop_loss, patience=patience, temperature=temperature,
            calibration_samples=calibration_samples, embed_dim=embed_dim)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc

    def dump_log(records):
        if log_path is not None:
            with Path(log_path).open("w") as fh:
                fh.write(json.dumps({"config": asdict(config)}) + "\n")
                for rec in records:
                    fh.write(json.dumps(rec) + "\n")

    try:
        result = tr.train(scorer.data, config, scorer=scorer)
    except TrainingDivergedError as exc:
        dump_log(exc.log)
        if exc.params is not None:
            pol.save_checkpoint(out_checkpoint, exc.params,
                                meta={"diverged": True})
        raise click.ClickException(f"training diverged: {exc}") from exc
    meta = {
        "reward_spec": result.reward_spec.to_json_obj(),
        "train_config": asdict(config),
        "epochs_run": len(result.log),
        "stopped_early": result.stopped_early,
    }
    pol.save_checkpoint(out_checkpoint, result.params, meta=meta)
    dump_log(result.log)
    final = result.log[-1]["mean_loss"] if result.log else float("nan")
    click.echo(f"trained {len(result.log)} epochs "
               f"(final mean loss {final:.4f}) -> {out_checkpoint}")


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--count", type=int, default=10000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--top-k", type=int, default=3, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="base path; writes <out>.csv and <out>.json")
def sample(checkpoint, data, count, seed, top_k, out):
    """Draw graphs from a trained policy and tabulate them by frequency."""
    params, spec, _ = _load_checkpoint(checkpoint)
    scorer = _load_scorer(data)
    fn = lambda g: log_reward(scorer.score(g), spec)
    drawn = tr.sample(params, fn, count, seed)
    groups: dict[bytes, dict] = {}
    for g, lr in drawn:
        e = groups.get(g.key)
        if e is None:
            groups[g.key] = {"graph": g, "log_reward": lr, "count": 1}
        else:
            e["count"] += 1
    rows = sorted(groups.values(), key=lambda e: (-e["count"], e["graph"].key))
    table = [
        [rank + 1, e["count"], e["count"] / count, e["log_reward"],
         scorer.score(e["graph"]), json.dumps(e["graph"].to_json_obj()["edges"])]
        for rank, e in enumerate(rows)
    ]
    base = Path(out)
    _write_csv(base.with_suffix(".csv"),
               ["rank", "count", "frequency", "log_reward", "bic", "edges"],
               table)
    by_reward = sorted(groups.values(), key=lambda e: -e["log_reward"])[:top_k]
    report = {
        "count": count, "seed": seed, "unique_graphs": len(groups),
        "top_by_reward": [
            {"graph": e["graph"].to_json_obj(), "log_reward": e["log_reward"],
             "bic": scorer.score(e["graph"]),
             "frequency": e["count"] / count}
            for e in by_reward
        ],
    }
    _write_json(base.with_suffix(".json"), report)
    click.echo(f"{count} samples, {len(groups)} unique graphs")
    for i, e in enumerate(report["top_by_reward"], 1):
        click.echo(f"  top{i}: bic={e['bic']:.2f} freq={e['frequency']:.4f} "
                   f"edges={e['graph']['edges']}")


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--count", type=int, default=50000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def assess(checkpoint, data, count, seed, out):
    """Compare sampler frequencies against the exact reward distribution."""
    params, spec, _ = _load_checkpoint(checkpoint)
    scorer = _load_scorer(data)
    if scorer.n > orc.ENUMERATION_MAX_NODES:
        raise click.ClickException(
            f"exact comparison supports n <= {orc.ENUMERATION_MAX_NODES}")
    space = orc.score_space(scorer.n, scorer.score, spec)
    exact = orc.exact_distribution(space)
    fn = lambda g: log_reward(scorer.score(g), spec)
    drawn = tr.sample(params, fn, count, seed)
    emp = tr.empirical_distribution(drawn, space)
    tv = tr.total_variation(emp, exact)

    pairs = node_pairs(scorer.n)
    exact_marg = orc.exact_feature_marginals(space)
    emp_marg = np.zeros_like(exact_marg)
    for idx, g in enumerate(space.graphs):
        emp_marg += emp[idx] * (space.features[idx][:, None]
                                == np.arange(1, 5)[None, :])
    relation_rows = [
        {"u": u, "v": v, "feature": f + 1,
         "exact": float(exact_marg[p, f]), "empirical": float(emp_marg[p, f])}
        for p, (u, v) in enumerate(pairs) for f in range(4)
    ]

    def _bucket(values):
        exact_w: dict = {}
        emp_w: dict = {}
        for idx, val in enumerate(values):
            exact_w[val] = exact_w.get(val, 0.0) + float(exact[idx])
            emp_w[val] = emp_w.get(val, 0.0) + float(emp[idx])
        return [{"value": v, "exact": exact_w[v], "empirical": emp_w.get(v, 0.0)}
                for v in sorted(exact_w)]

    map_graph = space.graphs[int(np.argmax(space.log_rewards))]
    bic_rows = _bucket([round(float(u), 6) for u in space.scores])
    shd_rows = _bucket([shd(g, map_graph) for g in space.graphs])

    base = Path(out)
    csv_rows = (
        [["relation", f"{r['u']}-{r['v']}:{r['feature']}", r["exact"],
          r["empirical"]] for r in relation_rows]
        + [["bic", r["value"], r["exact"], r["empirical"]] for r in bic_rows]
        + [["shd", r["value"], r["exact"], r["empirical"]] for r in shd_rows]
    )
    _write_csv(base.with_suffix(".csv"), ["table", "key", "exact", "empirical"],
               csv_rows)
    report = {
        "count": count, "seed": seed, "total_variation": tv,
        "max_marginal_gap": max(abs(r["exact"] - r["empirical"])
                                for r in relation_rows),
        "relation_marginals": relation_rows,
        "bic": bic_rows, "shd": shd_rows,
    }
    _write_json(base.with_suffix(".json"), report)
    click.echo(f"total variation vs exact: {tv:.4f} "
               f"(max marginal gap {report['max_marginal_gap']:.4f})")


@cli.command()
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--truth", required=True,
              help="preset name or path to a graph JSON file")
@click.option("--pi", type=float, default=0.9, show_default=True)
@click.option("--strategy", type=click.Choice(sorted(STRATEGY_ALIASES)),
              default="ce", show_default=True)
@click.option("--budget", type=int, default=None)
@click.option("--repeats", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--samples", type=int, default=2000, show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False),
              default=None, help="sample the belief from a trained policy "
              "instead of the exact distribution")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def elicit(data, truth, pi, strategy, budget, repeats, seed, samples,
           checkpoint, out):
    """Run the simulated query/answer loop and emit per-step expectation traces."""
    scorer = _load_scorer(data)
    n = scorer.n
    if truth in scm.PRESET_NAMES:
        true_graph = scm.preset(truth)
    else:
        try:
            true_graph = AncestralGraph.from_json_obj(
                json.loads(Path(truth).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise click.ClickException(f"cannot load truth graph: {exc}") from exc
    if true_graph.n != n:
        raise click.ClickException(
            f"truth has {true_graph.n} nodes, dataset has {n}")
    strat = STRATEGY_ALIASES[strategy]

    if checkpoint is not None:
        params, spec, _ = _load_checkpoint(checkpoint)
        fn = lambda g: log_reward(scorer.score(g), spec)
    else:
        if n > orc.ENUMERATION_MAX_NODES:
            raise click.ClickException(
                f"exact belief sampling supports n <= "
                f"{orc.ENUMERATION_MAX_NODES}; pass --checkpoint for larger n")
        from .scoring import calibrate_reward
        space = orc.score_space(n, scorer.score,
                                calibrate_reward(_space_scores(scorer, n)))

    all_rows = []
    traces = []
    for rep in range(repeats):
        rep_seed = seed + rep
        if checkpoint is not None:
            drawn = tr.sample(params, fn, samples, rep_seed)
            graphs = [g for g, _ in drawn]
            log_rs = [lr for _, lr in drawn]
        else:
            idx = orc.sample_indices(space, samples,
                                     np.random.default_rng(rep_seed))
            graphs = [space.graphs[i] for i in idx]
            log_rs = [float(space.log_rewards[i]) for i in idx]
        scores = [scorer.score(g) for g in graphs]
        belief = el.BeliefState.from_samples(graphs, log_rs, scores)
        _, trace = el.run_loop(belief, true_graph=true_graph, pi=pi,
                               strategy=strat, budget=budget, seed=rep_seed)
        traces.append(trace)
        for row in trace:
            all_rows.append([rep, row["step"],
                             "" if row["query"] is None else
                             f"{row['query'][0]}-{row['query'][1]}",
                             "" if row["answer"] is None else row["answer"],
                             row["expected_bic"], row["expected_shd"],
                             row["ess"]])

    steps = max(len(t) for t in traces)
    mean_bic = [float(np.mean([t[s]["expected_bic"] for t in traces
                               if s < len(t)])) for s in range(steps)]
    mean_shd = [float(np.mean([t[s]["expected_shd"] for t in traces
                               if s < len(t)])) for s in range(steps)]
    base = Path(out)
    _write_csv(base.with_suffix(".csv"),
               ["repeat", "step", "query", "answer", "expected_bic",
                "expected_shd", "ess"], all_rows)
    _write_json(base.with_suffix(".json"), {
        "pi": pi, "strategy": strat, "budget": budget, "repeats": repeats,
        "seed": seed, "samples": samples,
        "traces": traces,
        "mean_expected_bic": mean_bic,
        "mean_expected_shd": mean_shd,
    })
    click.echo(f"expected BIC {mean_bic[0]:.2f} -> {mean_bic[-1]:.2f}; "
               f"expected SHD {mean_shd[0]:.3f} -> {mean_shd[-1]:.3f} "
               f"({repeats} repeats)")


def _space_scores(scorer: GraphScorer, n: int):
    return [scorer.score(g) for g in orc.enumerate_ags(n)]


@cli.command()
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--data-dir", type=click.Path(file_okay=False), default=None)
def serve(config_path, host, port, data_dir):
    """Start the HTTP service."""
    from . import service as svc

    try:
        cfg = svc.load_config(config_path)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    from dataclasses import replace
    if host is not None:
        cfg = replace(cfg, host=host)
    if port is not None:
        cfg = replace(cfg, port=port)
    if data_dir is not None:
        cfg = replace(cfg, data_dir=data_dir)
    click.echo(f"serving on {cfg.host}:{cfg.port} (data dir {cfg.data_dir})")
    svc.serve(cfg)


main = cli

if __name__ == "__main__":  # pragma: no cover
    cli()
