"""
Command-line entry point: python Trep.py <command> [options].

Every command reads only the paths it is given, writes under --out-dir and
records what it read and wrote in manifest-<command>.json.
"""
import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import altair as alt
import numpy as np
import pandas as pd

import TrepPlatform
from TrepPlatform import ConfigError, DataError, TrepError
import GridNetwork
import GraphEmbed
import Actor
import Critic
import Trainer
import Evaluation
import DataIO
import TensorCore as tc


@dataclass
class RunManifest:
    command: str
    config: Dict
    seeds: Dict[str, int]
    map_hash: Optional[str] = None
    inputs: Dict[str, str] = field(default_factory=dict)  # path -> sha256
    checkpoints: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    cache_dir: Optional[str] = None
    tool_version: str = TrepPlatform.TOOL_VERSION

    def read(self, path: Optional[str]):
        if not path:
            return
        if not os.path.isfile(path):
            raise DataError(f"input file not found: {path}")
        self.inputs[path] = TrepPlatform.sha256_file(path)

    def wrote(self, path: str):
        self.outputs.append(path)

    def save(self, out_dir: str) -> str:
        path = os.path.join(out_dir, f"manifest-{self.command}.json")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(asdict(self), f, sort_keys=True, indent=2)
            f.write("\n")
        return path


class Run:
    """Per-invocation context: parsed arguments, config, output directory, manifest."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = TrepPlatform.load_config(args.config, seed=args.seed)
        self.out_dir = args.out_dir
        os.makedirs(self.out_dir, exist_ok=True)
        self.cache_dir = self.config.cache_dir or os.path.join(self.out_dir, ".cache")
        self.quiet = args.quiet
        self.manifest = RunManifest(args.command, self.config.to_dict(), {
            name: TrepPlatform.component_int_seed(self.config.seed, name) for name in TrepPlatform.SEED_COMPONENTS})
        self.manifest.read(args.config)
        self._net = None
        self._table = None

    def output(self, name: str) -> str:
        path = os.path.join(self.out_dir, name)
        self.manifest.wrote(path)
        return path

    @property
    def net(self) -> GridNetwork.RoadNetwork:
        if self._net is None:
            if not getattr(self.args, "map", None):
                raise ConfigError(f"{self.args.command} needs --map")
            self.manifest.read(self.args.map)
            self.manifest.read(self.args.walls)
            self._net = GridNetwork.network_from_files(self.args.map, self.args.walls, self.config.alpha,
                                                       tuple(self.config.origin))
            self.manifest.map_hash = self._net.hash
        return self._net

    @property
    def table(self) -> GraphEmbed.EmbeddingTable:
        if self._table is None:
            path = getattr(self.args, "embeddings", None)
            if path:
                self.manifest.read(path)
                self._table = GraphEmbed.load_embeddings(path, self.net)
            else:
                self.manifest.cache_dir = self.cache_dir
                self._table = GraphEmbed.embeddings_for(self.net, self.config, self.cache_dir, self.quiet)
        return self._table

    def corpus(self, path: Optional[str] = None) -> List[GridNetwork.Trajectory]:
        path = path or self.args.corpus
        if not path:
            raise ConfigError(f"{self.args.command} needs --corpus")
        self.manifest.read(path)
        return DataIO.read_corpus(path, self.net)

    def model_config(self, metadata: Dict[str, str]) -> TrepPlatform.TrepConfig:
        """Architecture settings of a checkpoint; the current config when it carries none."""
        if "config" not in metadata:
            return self.config
        return TrepPlatform.TrepConfig(**json.loads(metadata["config"]))

    def load_checkpoint(self, path: Optional[str] = None, only: Optional[Sequence[str]] = None):
        path = path or self.args.checkpoint
        if not path:
            raise ConfigError(f"{self.args.command} needs --checkpoint")
        self.manifest.read(path)
        stores, metadata = tc.load_checkpoint(path, only)
        if metadata.get("map_hash", self.net.hash) != self.net.hash:
            raise DataError(f"checkpoint {path} was trained on a different map")
        return stores, metadata

    def actor(self, stores: Dict[str, tc.ParameterStore], metadata: Dict[str, str]) -> Actor.TrajectoryAutoencoder:
        cfg = self.model_config(metadata)
        cls = Evaluation.CssrnnModel if metadata.get("kind") == "cssrnn" else Actor.TrajectoryAutoencoder
        return cls(Actor.ActorConfig.from_config(cfg), self.net, self.table, params=stores["actor"])

    def checkpoint(self, name: str, stores: Dict[str, tc.ParameterStore], kind: str = "trep"):
        path = os.path.join(self.out_dir, name)
        tc.save_checkpoint(path, stores, {"config": TrepPlatform.stable_json(self.config.to_dict()),
                                          "map_hash": self.net.hash, "kind": kind,
                                          "tool_version": TrepPlatform.TOOL_VERSION})
        self.manifest.checkpoints.append(path)
        return path


def write_encodings(path: str, vectors: Sequence[np.ndarray]):
    pd.DataFrame(np.asarray(vectors)).to_csv(path, header=False, index=False, float_format="%.17g",
                                             lineterminator="\n")


def read_encodings(path: str) -> np.ndarray:
    try:
        return pd.read_csv(path, header=None).to_numpy(dtype=np.float64)
    except FileNotFoundError:
        raise DataError(f"encodings file not found: {path}")
    except (ValueError, pd.errors.EmptyDataError) as e:
        raise DataError(f"encodings file {path} is malformed: {e}")


def write_jsonl(path: str, records: Sequence[Dict]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_build_map(run: Run):
    net = run.net
    grid_path, walls_path = run.output("map.txt"), run.output("walls.txt")
    GridNetwork.write_occupancy_map(net.occupancy, net.spec.height, net.spec.width, grid_path, walls_path)
    print(f"map_hash={net.hash} cells={len(net)} edges={net.graph.number_of_edges()}")


def cmd_gen_synth(run: Run):
    args = run.args
    if args.scenario:
        run.manifest.read(args.scenario)
        spec = DataIO.load_scenario(args.scenario)
    else:
        spec = DataIO.default_scenario(run.net, args.per_group,
                                       TrepPlatform.component_int_seed(run.config.seed, "synthetic"))
    corpus = DataIO.generate_synthetic(run.net, spec)
    DataIO.write_corpus(run.output("corpus.tsv"), corpus)
    if args.heldout:
        held_spec = DataIO.ScenarioSpec(spec.groups, spec.per_group, spec.seed + 1)
        heldout = DataIO.perturb_corpus(DataIO.generate_synthetic(run.net, held_spec), run.net, args.noise,
                                        TrepPlatform.component_rng(run.config.seed, "perturb"))
        DataIO.write_corpus(run.output("heldout.tsv"), heldout)


def cmd_ingest_atc(run: Run):
    run.manifest.read(run.args.input)
    result = DataIO.ingest_atc(run.args.input, run.net, run.config)
    DataIO.write_corpus(run.output("corpus.tsv"), result.trajectories)
    print(f"trajectories={len(result.trajectories)} dropped_blocked={result.dropped_blocked} "
          f"dropped_bounds={result.dropped_bounds} dropped_short={result.dropped_short}")


def cmd_embed(run: Run):
    GraphEmbed.save_embeddings(run.output("embeddings.npz"), run.table)


def cmd_pretrain(run: Run):
    config = run.config
    train_config = Trainer.TrainConfig.from_config(config)
    corpus = run.corpus()
    actor = Actor.TrajectoryAutoencoder(Actor.ActorConfig.from_config(config), run.net, run.table,
                                        seed=TrepPlatform.component_seed(config.seed, "actor_init"),
                                        freeze_embeddings=config.freeze_embeddings)
    critic = Critic.QValueEstimator(Critic.CriticConfig.from_config(config), run.net, run.table,
                                    seed=TrepPlatform.component_seed(config.seed, "critic_init"))
    log = Trainer.TrainingLog(run.output("pretrain_log.jsonl"))
    Trainer.pretrain_actor(actor, corpus, train_config, log=log, quiet=run.quiet)
    Trainer.pretrain_critic(actor, critic, train_config, log=log, quiet=run.quiet)
    run.checkpoint("pretrained.npz", {"actor": actor.params, "critic": critic.params})


def cmd_train(run: Run):
    stores, metadata = run.load_checkpoint()
    if "critic" not in stores:
        raise DataError("training needs a checkpoint holding both actor and critic")
    actor = run.actor(stores, metadata)
    critic = Critic.QValueEstimator(Critic.CriticConfig.from_config(run.model_config(metadata)), run.net, run.table,
                                    params=stores["critic"])
    log = Trainer.TrainingLog(run.output("train_log.jsonl"))
    result = Trainer.train(actor, critic, Trainer.TrainConfig.from_config(run.config),
                           delayed_actor=stores.get("actor_delayed"), delayed_critic=stores.get("critic_delayed"),
                           log=log, quiet=run.quiet)
    run.checkpoint("trained.npz", {"actor": result.actor_params, "critic": result.critic_params,
                                   "actor_delayed": result.delayed_actor, "critic_delayed": result.delayed_critic})
    print(f"iterations={result.iterations} converged={str(result.converged).lower()}")


def cmd_encode(run: Run):
    stores, metadata = run.load_checkpoint(only=("actor",))
    actor = run.actor(stores, metadata)
    write_encodings(run.output(run.args.output), [actor.encode(traj).vector for traj in run.corpus()])


def cmd_cluster(run: Run):
    run.manifest.read(run.args.encodings)
    vectors = read_encodings(run.args.encodings)
    assignment = Evaluation.kmeans_cluster(vectors, run.args.k, TrepPlatform.component_int_seed(run.config.seed, "cluster"),
                                           run.config.kmeans_restarts)
    frame = pd.DataFrame({"trajectory": np.arange(len(vectors)), "cluster": assignment.labels,
                          "medoid": [assignment.medoid_of(i) == i for i in range(len(vectors))]})
    frame.to_csv(run.output("clusters.csv"), index=False, lineterminator="\n")
    if run.args.corpus:
        labels = [traj.label for traj in run.corpus()]
        print(f"ari={Evaluation.adjusted_rand_index(assignment, labels):.6f}")


def cmd_eval_wcse(run: Run):
    args = run.args
    if args.k_min < 1 or args.k_max < args.k_min:
        raise ConfigError("--k-min and --k-max must satisfy 1 <= k-min <= k-max")
    run.manifest.read(args.encodings)
    vectors = read_encodings(args.encodings)
    corpus = run.corpus()
    if len(vectors) != len(corpus):
        raise DataError(f"{len(vectors)} encodings for {len(corpus)} trajectories")
    curve = Evaluation.wcse_curve(vectors, corpus, range(args.k_min, args.k_max + 1), run.net,
                                  TrepPlatform.component_int_seed(run.config.seed, "cluster"), run.config.kmeans_restarts)
    curve.to_csv(run.output(args.output), index=False, lineterminator="\n")


def cmd_baseline(run: Run):
    args = run.args
    corpus = run.corpus()
    if args.method == "dft":
        vectors = [Evaluation.dft_encode(traj, run.net.spec, run.config.repr_dim) for traj in corpus]
    else:
        train_corpus = run.corpus(args.train_corpus) if args.train_corpus else corpus
        if args.method == "cssrnn":
            model = Evaluation.cssrnn_baseline(train_corpus, run.net, run.table, run.config, run.quiet)
        else:
            model = Evaluation.trep_ll_baseline(train_corpus, run.net, run.table, run.config, run.quiet)
        run.checkpoint(f"baseline-{args.method}.npz", {"actor": model.params}, kind=args.method)
        vectors = [model.encode(traj).vector for traj in corpus]
    write_encodings(run.output(args.output or f"encodings-{args.method}.csv"), vectors)


def cmd_perturb(run: Run):
    args = run.args
    stores, metadata = run.load_checkpoint(only=("actor",))
    model = run.actor(stores, metadata)
    records = Evaluation.perturbation_trials(model, run.corpus(), run.net, args.step, args.delta,
                                             TrepPlatform.component_rng(run.config.seed, "perturb"),
                                             name=args.name or metadata.get("kind", "trep"))
    write_jsonl(run.output(args.output), records)
    horizons = [math.inf if r["horizon"] is None else r["horizon"] for r in records]
    if horizons:
        print(f"trials={len(horizons)} median_horizon={float(np.median(horizons))}")


def cmd_export_curves(run: Run):
    frames = []
    for path in run.args.inputs:
        run.manifest.read(path)
        try:
            frame = pd.read_csv(path)
        except FileNotFoundError:
            raise DataError(f"curve file not found: {path}")
        if not {"K", "WCSE"} <= set(frame.columns):
            raise DataError(f"{path} is not a K,WCSE curve")
        frame.insert(0, "series", os.path.splitext(os.path.basename(path))[0])
        frames.append(frame[["series", "K", "WCSE"]])
    merged = pd.concat(frames, ignore_index=True)
    merged.to_csv(run.output(f"{run.args.output}.csv"), index=False, lineterminator="\n")

    chart = alt.Chart(merged).mark_line(point=True).encode(
        x=alt.X('K:Q', title='Number of clusters K'),
        y=alt.Y('WCSE:Q', title='WCSE'),
        color=alt.Color('series:N', title='Method'),
    ).properties(width=480, height=320)
    chart.save(run.output(f"{run.args.output}.svg"))


COMMANDS = {
    "build-map": cmd_build_map,
    "gen-synth": cmd_gen_synth,
    "ingest-atc": cmd_ingest_atc,
    "embed": cmd_embed,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "encode": cmd_encode,
    "cluster": cmd_cluster,
    "eval-wcse": cmd_eval_wcse,
    "baseline": cmd_baseline,
    "perturb": cmd_perturb,
    "export-curves": cmd_export_curves,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file", default=None)
    common.add_argument("--seed", type=int, help="Root seed, overrides the config", default=None)
    common.add_argument("--out-dir", help="Directory for every output of the command", default=".")
    common.add_argument("--quiet", action="store_true", help="Hide progress bars")
    common.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")

    network = argparse.ArgumentParser(add_help=False)
    network.add_argument("--map", help="Occupancy map file ('.' free, '#' blocked)")
    network.add_argument("--walls", help="Wall segments file, one 'r1,c1-r2,c2' per line", default=None)
    network.add_argument("--embeddings", help="Embedding table from the embed command", default=None)

    parser = argparse.ArgumentParser(description="Trajectory representations for pedestrian road networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("build-map", parents=[common, network], help="Normalize a map and report its hash")

    p = sub.add_parser("gen-synth", parents=[common, network], help="Generate a labeled synthetic corpus")
    p.add_argument("--scenario", help="Scenario YAML or JSON; the default six-group scenario otherwise")
    p.add_argument("--per-group", type=int, default=10)
    p.add_argument("--heldout", action="store_true", help="Also write perturbed held-out variants")
    p.add_argument("--noise", type=float, default=0.1, help="Detour rate of the held-out variants")

    p = sub.add_parser("ingest-atc", parents=[common, network], help="Convert an ATC-style CSV log to a corpus")
    p.add_argument("--input", required=True)

    sub.add_parser("embed", parents=[common, network], help="Train cell embeddings")

    p = sub.add_parser("pretrain", parents=[common, network], help="Likelihood pretraining of actor and critic")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("train", parents=[common, network], help="Actor-critic training")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("encode", parents=[common, network], help="Write one representation per trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", default="encodings.csv")

    p = sub.add_parser("cluster", parents=[common, network], help="k-means over representations")
    p.add_argument("--encodings", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--corpus", help="Labeled corpus; reports the adjusted Rand index")

    p = sub.add_parser("eval-wcse", parents=[common, network], help="WCSE for a range of K")
    p.add_argument("--encodings", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--output", default="wcse.csv")

    p = sub.add_parser("baseline", parents=[common, network], help="Baseline representations")
    p.add_argument("method", choices=["dft", "cssrnn", "trep-ll"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-corpus", help="Training corpus of learned baselines; --corpus otherwise")
    p.add_argument("--output", default=None)

    p = sub.add_parser("perturb", parents=[common, network], help="Recoverability after a forced wrong action")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--step", type=int, default=3)
    p.add_argument("--delta", type=int, default=0)
    p.add_argument("--name", default=None)
    p.add_argument("--output", default="perturb.jsonl")

    p = sub.add_parser("export-curves", parents=[common], help="Merge K,WCSE curves into CSV and SVG")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--output", default="curves")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    TrepPlatform.configure_logging(args.log_level)
    try:
        run = Run(args)
        COMMANDS[args.command](run)
        run.manifest.save(run.out_dir)
    except TrepError as e:
        print(f"error={e.category} {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
