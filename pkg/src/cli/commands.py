"""One function per CLI command. Each reads its inputs from ``ctx.out``, verifies
their provenance, computes, and writes container artifacts plus a CSV table."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from src.cli import artifacts
from src.config.schema import RunConfig, config_hash, shared_config_hash
from src.curvature.dense import dense_ggn
from src.curvature.ekfac import ekfac_correct
from src.curvature.kfac import accumulate_kfac
from src.curvature.projected import projected_ef
from src.curvature.state import DENSE, EKFAC, KFAC, PROJECTED, CurvatureState
from src.data.toy import Dataset, make_dataset
from src.diffusion.measurements import SQUARE_NORM, MeasurementFn, measure
from src.diffusion.sampling import ddpm_sample_batch
from src.diffusion.schedule import NoiseSchedule, make_schedule
from src.evaluation.ablation import remove_random_and_retrain, remove_top_and_retrain
from src.evaluation.metrics import lds
from src.evaluation.retraining import TrainSetup, exact_retraining_predictor, retrain_oracle
from src.evaluation.subsets import sample_subsets
from src.evaluation.timestep_grid import timestep_cross_lds
from src.influence.cache import build_train_cache, score_queries
from src.influence.prediction import predict_lds_deltas
from src.influence.scores import ScoreMatrix, influence_scores, random_scores
from src.nn.network import EpsilonNet, build_network
from src.nn.training import OptimizerConfig, train
from src.utils.container import ArtifactContainer
from src.utils.errors import ConfigurationError, ContainerError
from src.utils.rng import RngStream
from src.utils.tables import read_table, write_table

logger = logging.getLogger(__name__)

MODEL = "model.dinf"
DATASET = "dataset.dinf"
QUERIES = "queries.dinf"
CACHE = "train_cache.dinf"
BENCHMARK = "lds_benchmark.dinf"
GRID = "timestep_grid.dinf"

# checked against the shared hash, so runs that differ only in scoring settings reuse them
SHARED = frozenset({MODEL, DATASET, QUERIES, BENCHMARK})


def curvature_name(label: str) -> str:
    return f"curvature_{label}.dinf"


def scores_name(label: str) -> str:
    return f"scores_{label}.dinf"


@dataclass(frozen=True)
class RunContext:
    cfg: RunConfig
    out: Path
    workers: int = 1
    progress: bool = False

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg)

    @property
    def shared_hash(self) -> str:
        return shared_config_hash(self.cfg)

    @property
    def label(self) -> str:
        return self.cfg.attribution.score_label

    @property
    def curvature(self) -> str:
        return curvature_name(self.label)

    @property
    def scores(self) -> str:
        return scores_name(self.label)

    def path(self, name: str) -> Path:
        return self.out / name

    def meta(self, *inputs: str, **extra) -> dict:
        return artifacts.provenance(
            self.config_hash, {n: self.path(n) for n in inputs}, shared_hash=self.shared_hash, **extra
        )

    def open(self, name: str, *inputs: str, shared: bool | None = None) -> ArtifactContainer:
        if shared is None:
            shared = name in SHARED
        key, expected = ("shared_hash", self.shared_hash) if shared else ("config_hash", self.config_hash)
        return artifacts.open_artifact(self.path(name), expected, {n: self.path(n) for n in inputs}, key=key)

    def table_meta(self) -> dict:
        return {"config_hash": self.config_hash}


# -- shared builders ---------------------------------------------------------


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.T, s.beta_min, s.beta_max, s.kind)


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.dataset
    kwargs = {"n_components": d.n_components} if d.kind == "gaussian_mixture" else {}
    return make_dataset(d.kind, d.N, d.data_dim, d.seed, **kwargs)


def optimizer_config(cfg: RunConfig) -> OptimizerConfig:
    t = cfg.training
    return OptimizerConfig(
        name=t.optimizer,
        lr=t.lr,
        momentum=t.momentum,
        beta1=t.beta1,
        beta2=t.beta2,
        batch_size=t.batch_size,
        sampler=t.sampler,
        log_every=t.log_every,
    )


def train_setup(cfg: RunConfig, schedule: NoiseSchedule, dataset: Dataset) -> TrainSetup:
    return TrainSetup(
        arch=cfg.arch_dict(),
        schedule=schedule,
        dataset=dataset,
        optimizer=optimizer_config(cfg),
        steps=cfg.training.steps,
        seed=cfg.training.seed,
        subset_steps=cfg.training.retrain_steps,
    )


def attribution_stream(cfg: RunConfig, purpose: str) -> RngStream:
    return RngStream(cfg.attribution.seed).child(purpose)


def measurement_fn(cfg: RunConfig) -> MeasurementFn:
    a = cfg.attribution
    return MeasurementFn(a.measurement, a.measurement_S, attribution_stream(cfg, "measurement"), a.measurement_t)


def train_measurement_fn(cfg: RunConfig) -> MeasurementFn | None:
    if cfg.attribution.train_measurement is None:
        return None
    return MeasurementFn(SQUARE_NORM, cfg.attribution.S, attribution_stream(cfg, "train_gradients"))


def query_seeds(cfg: RunConfig) -> list[int]:
    stream = RngStream(cfg.evaluation.seed)
    return [int(stream.child("query", q).generator().integers(0, 2**62)) for q in range(cfg.evaluation.Q)]


def _load_model_and_data(ctx: RunContext) -> tuple[EpsilonNet, Dataset]:
    net = artifacts.network_from_container(ctx.open(MODEL))
    dataset = artifacts.dataset_from_container(ctx.open(DATASET))
    return net, dataset


def _load_queries(ctx: RunContext):
    return artifacts.queries_from_container(ctx.open(QUERIES, MODEL))


def _load_state(ctx: RunContext, net: EpsilonNet) -> CurvatureState:
    return artifacts.curvature_from_container(ctx.open(ctx.curvature, MODEL, DATASET), net)


def _scores_from_container(container: ArtifactContainer) -> dict[float, ScoreMatrix]:
    out = {}
    for k, damping in enumerate(container.meta["dampings"]):
        out[float(damping)] = ScoreMatrix(
            container[f"scores_{k}"],
            container["query_ids"],
            container["train_ids"],
            container.meta["score_meta"][k],
        )
    return out


def _load_scores(ctx: RunContext) -> dict[float, ScoreMatrix]:
    return _scores_from_container(ctx.open(ctx.scores, MODEL, DATASET, QUERIES, ctx.curvature))


def _load_all_scores(ctx: RunContext) -> dict[str, dict[float, ScoreMatrix]]:
    """Every score file in the run directory that shares this run's model, queries and benchmark."""
    found = {}
    for path in sorted(ctx.out.glob("scores_*.dinf")):
        container = ctx.open(path.name, MODEL, DATASET, QUERIES, shared=True)
        found[container.meta.get("label", path.stem.removeprefix("scores_"))] = _scores_from_container(container)
    if not found:
        raise ContainerError(f"no score files in {ctx.out}; run influence first")
    return found


# -- commands ----------------------------------------------------------------


def cmd_train(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    schedule = build_schedule(cfg)
    dataset = build_dataset(cfg)
    net = build_network(cfg.arch_dict(), cfg.training.seed)
    trained, curve = train(
        net, schedule, dataset, None, optimizer_config(cfg), cfg.training.steps, cfg.training.seed
    )
    artifacts.dataset_to_container(dataset, ctx.meta(dataset_seed=cfg.dataset.seed)).save(ctx.path(DATASET))
    artifacts.network_to_container(trained, ctx.meta(DATASET, training_seed=cfg.training.seed)).save(
        ctx.path(MODEL)
    )
    frame = pd.DataFrame(curve, columns=["step", "loss"])
    write_table(frame, ctx.path("train_loss.csv"), ctx.table_meta())
    return {"parameters": trained.param_count, "final_loss": curve[-1][1] if curve else float("nan")}


def cmd_sample(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    net = artifacts.network_from_container(ctx.open(MODEL))
    seeds = query_seeds(cfg)
    _, trajectories = ddpm_sample_batch(net, build_schedule(cfg), seeds, net.data_dim, record=True)
    artifacts.queries_to_container(trajectories, ctx.meta(MODEL, query_seeds=seeds)).save(ctx.path(QUERIES))
    samples = np.stack([tr.sample for tr in trajectories])
    frame = pd.DataFrame(samples, columns=[f"x{i}" for i in range(samples.shape[1])])
    frame.insert(0, "seed", seeds)
    frame.insert(0, "query", np.arange(len(seeds)))
    write_table(frame, ctx.path("queries.csv"), ctx.table_meta())
    return {"queries": len(seeds)}


def cmd_measure(ctx: RunContext) -> dict:
    net = artifacts.network_from_container(ctx.open(MODEL))
    queries = _load_queries(ctx)
    schedule = build_schedule(ctx.cfg)
    fn = measurement_fn(ctx.cfg)
    values = [measure(net, schedule, fn.for_query(q), queries[q]) for q in range(len(queries))]
    frame = pd.DataFrame({"query": np.arange(len(values)), "kind": fn.kind, "value": values})
    write_table(frame, ctx.path("measurements.csv"), ctx.table_meta())
    return {"mean_measurement": float(np.mean(values))}


def build_state(ctx: RunContext, net: EpsilonNet, schedule: NoiseSchedule, dataset: Dataset) -> CurvatureState:
    a = ctx.cfg.attribution
    stream = attribution_stream(ctx.cfg, "curvature")
    if a.backend in (KFAC, EKFAC):
        state = accumulate_kfac(
            net, schedule, dataset, a.ggn_kind, a.sharing, a.basis_samples, stream,
            estimator=a.estimator, workers=ctx.workers, progress=ctx.progress,
        )
        if a.backend == EKFAC:
            state = ekfac_correct(
                state, net, schedule, dataset, a.correction_samples,
                attribution_stream(ctx.cfg, "ekfac"), workers=ctx.workers, progress=ctx.progress,
            )
        return state
    if a.backend == DENSE:
        return dense_ggn(net, schedule, dataset, a.ggn_kind, a.S, stream, workers=ctx.workers)
    return projected_ef(
        net, schedule, dataset, a.d_proj, a.proj_seed, a.S, stream,
        workers=ctx.workers, progress=ctx.progress,
    )


def _curvature_summary(state: CurvatureState) -> pd.DataFrame:
    if state.blocks is not None:
        rows = []
        for l, block in enumerate(state.blocks):
            rows.append(
                {
                    "layer": l,
                    "A_dim": block.A.shape[0],
                    "B_dim": block.B.shape[0],
                    "A_trace": float(np.trace(block.A)),
                    "B_trace": float(np.trace(block.B)),
                    "block_trace": float(
                        state.scale * (np.sum(block.corrected) if block.corrected is not None
                                       else np.trace(block.A) * np.trace(block.B))
                    ),
                }
            )
        return pd.DataFrame(rows)
    H = state.dense if state.backend == DENSE else state.projected.second_moment
    eig = np.linalg.eigvalsh(H)
    return pd.DataFrame(
        [{"layer": "all", "dim": H.shape[0], "trace": float(np.trace(H)), "eig_min": eig[0], "eig_max": eig[-1]}]
    )


def cmd_factors(ctx: RunContext) -> dict:
    net, dataset = _load_model_and_data(ctx)
    state = build_state(ctx, net, build_schedule(ctx.cfg), dataset)
    meta = ctx.meta(MODEL, DATASET, label=ctx.label)
    artifacts.curvature_to_container(state, meta).save(ctx.path(ctx.curvature))
    write_table(_curvature_summary(state), ctx.path(f"curvature_{ctx.label}.csv"), ctx.table_meta())
    return {"backend": state.backend, "ggn_kind": state.ggn_kind}


def cmd_influence(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    net, dataset = _load_model_and_data(ctx)
    queries = _load_queries(ctx)
    state = _load_state(ctx, net)
    schedule = build_schedule(cfg)

    container = ArtifactContainer(
        meta=ctx.meta(
            MODEL, DATASET, QUERIES, ctx.curvature,
            label=ctx.label, dampings=list(cfg.attribution.damping), score_meta=[],
        )
    )
    for k, damping in enumerate(cfg.attribution.damping):
        sm = influence_scores(
            net, schedule, state, damping, queries, measurement_fn(cfg), dataset,
            cfg.attribution.S, attribution_stream(cfg, "train_gradients"),
            compress=cfg.attribution.compress, workers=ctx.workers,
            train_measurement=train_measurement_fn(cfg), progress=ctx.progress,
        )
        container.add(f"scores_{k}", sm.scores)
        container.meta["score_meta"].append(sm.meta)
        if k == 0:
            container.add("query_ids", sm.query_ids)
            container.add("train_ids", sm.train_ids)
        sm.write_csv(ctx.path(f"scores_{ctx.label}_{k}.csv"), {**ctx.table_meta(), "damping": damping})
    container.save(ctx.path(ctx.scores))
    return {"dampings": len(cfg.attribution.damping), "queries": len(queries), "train": len(dataset)}


def cmd_cache(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    net, dataset = _load_model_and_data(ctx)
    queries = _load_queries(ctx)
    state = _load_state(ctx, net)
    schedule = build_schedule(cfg)
    damping = cfg.attribution.damping[0]
    cache = build_train_cache(
        net, schedule, state, damping, dataset, cfg.attribution.S,
        attribution_stream(cfg, "train_gradients"), compress=cfg.attribution.compress,
        workers=ctx.workers, train_measurement=train_measurement_fn(cfg), progress=ctx.progress,
    )
    cache.to_container(ctx.meta(MODEL, DATASET, ctx.curvature)).save(ctx.path(CACHE))
    sm = score_queries(cache, net, schedule, queries, measurement_fn(cfg), workers=ctx.workers)
    sm.write_csv(ctx.path("cache_scores.csv"), {**ctx.table_meta(), "damping": damping})
    return {"cached": len(cache.train_ids), "queries": len(queries)}


def cmd_lds_make(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    net, dataset = _load_model_and_data(ctx)
    queries = _load_queries(ctx)
    e = cfg.evaluation
    setup = train_setup(cfg, build_schedule(cfg), dataset)
    subsets = sample_subsets(len(dataset), e.M, e.fraction, e.seed)
    fn = measurement_fn(cfg)
    oracle = retrain_oracle(setup, subsets, e.K, queries, fn, e.downweight_fraction, ctx.workers, ctx.progress)
    # a seed outside the oracle ensemble
    exact = exact_retraining_predictor(
        setup, subsets, queries, fn, seed=cfg.training.seed + e.K,
        downweight_fraction=e.downweight_fraction, workers=ctx.workers,
    )
    container = ArtifactContainer(meta=ctx.meta(MODEL, DATASET, QUERIES, subset_seed=e.seed))
    container.add("subsets", np.stack(subsets).astype(np.uint64))
    container.add("oracle", oracle)
    container.add("exact_predictions", exact)
    container.save(ctx.path(BENCHMARK))

    M, K, Q = oracle.shape
    frame = pd.DataFrame(
        {
            "subset": np.repeat(np.arange(M), K * Q),
            "seed_offset": np.tile(np.repeat(np.arange(K), Q), M),
            "query": np.tile(np.arange(Q), M * K),
            "value": oracle.ravel(),
        }
    )
    write_table(frame, ctx.path("lds_oracle.csv"), ctx.table_meta())
    return {"subsets": M, "seeds": K, "missing": int(np.isnan(oracle).sum())}


def _read_predictions(path: Path, M: int, Q: int) -> np.ndarray:
    frame, _ = read_table(path)
    values = frame.drop(columns=[c for c in ("subset",) if c in frame.columns]).to_numpy(dtype=np.float64)
    if values.shape != (M, Q):
        raise ConfigurationError(f"predictions table has shape {values.shape}, benchmark needs {(M, Q)}")
    return values


def cmd_lds_eval(ctx: RunContext, predictions: Path | None = None) -> dict:
    cfg = ctx.cfg
    bench = ctx.open(BENCHMARK, MODEL, DATASET, QUERIES)
    subsets = [row.astype(np.int64) for row in bench["subsets"]]
    oracle = bench["oracle"]
    M, _, Q = oracle.shape
    N = cfg.dataset.N
    frac = cfg.evaluation.downweight_fraction

    results: list[tuple[str, float, object]] = []
    if predictions is not None:
        results.append(("file", float("nan"), lds(_read_predictions(predictions, M, Q), oracle)))
    else:
        for label, scores in _load_all_scores(ctx).items():
            for damping, sm in scores.items():
                results.append((label, damping, lds(predict_lds_deltas(sm, subsets, N, frac), oracle)))
        rand = random_scores(Q, N, cfg.evaluation.seed)
        results.append(("random", float("nan"), lds(predict_lds_deltas(rand, subsets, N, frac), oracle)))
        results.append(("exact_retraining", float("nan"), lds(bench["exact_predictions"], oracle)))

    rows = []
    for method, damping, res in results:
        row = {"method": method, "damping": damping, "lds_mean": res.mean, "lds_stderr": res.stderr}
        row.update({f"q{q}": v for q, v in enumerate(res.per_query)})
        rows.append(row)
    frame = pd.DataFrame(rows)
    write_table(frame, ctx.path("lds_results.csv"), ctx.table_meta())
    for method, damping, res in results:
        per_query = " ".join(f"{v:.3f}" for v in res.per_query)
        print(f"{method:>18s} damping={damping:<8g} LDS {res.mean:.3f} +/- {res.stderr:.3f} | {per_query}")
    return {"methods": len(results)}


def cmd_ablate_remove_top(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    net, dataset = _load_model_and_data(ctx)
    queries = _load_queries(ctx)
    scores = _load_scores(ctx)
    damping, sm = next(iter(scores.items()))
    setup = train_setup(cfg, build_schedule(cfg), dataset)
    fn = measurement_fn(cfg)
    frames = []
    for percent in cfg.evaluation.percent:
        top = remove_top_and_retrain(sm, percent, setup, queries, fn, ctx.workers)
        rand = remove_random_and_retrain(percent, setup, queries, fn, cfg.evaluation.seed, ctx.workers)
        frames.append(top.to_frame(ctx.label, percent))
        frames.append(rand.to_frame("random", percent))
        logger.info(
            "percent %.1f: mean delta %.4g (influence) vs %.4g (random)",
            percent, np.nanmean(top.deltas), np.nanmean(rand.deltas),
        )
    frame = pd.concat(frames, ignore_index=True)
    write_table(frame, ctx.path("remove_top.csv"), {**ctx.table_meta(), "damping": damping})
    return {"rows": len(frame)}


def cmd_timestep_grid(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    net, dataset = _load_model_and_data(ctx)
    queries = _load_queries(ctx)
    state = _load_state(ctx, net)
    e = cfg.evaluation
    setup = train_setup(cfg, build_schedule(cfg), dataset)
    subsets = sample_subsets(len(dataset), e.M, e.fraction, e.seed)
    grid = timestep_cross_lds(
        setup, net, state, cfg.attribution.damping[0], e.proxy_timesteps, e.target_timesteps,
        subsets, e.K, queries, cfg.attribution.measurement_S,
        attribution_stream(cfg, "measurement"), attribution_stream(cfg, "train_gradients"),
        downweight_fraction=e.downweight_fraction, workers=ctx.workers,
    )
    container = ArtifactContainer(meta=ctx.meta(MODEL, DATASET, QUERIES, ctx.curvature))
    container.add("grid", grid.grid)
    container.add("stderr", grid.stderr)
    container.add("proxy_timesteps", np.array(grid.proxy_timesteps, dtype=np.uint64))
    container.add("target_timesteps", np.array(grid.target_timesteps, dtype=np.uint64))
    container.save(ctx.path(GRID))
    write_table(grid.to_frame(), ctx.path("timestep_grid.csv"), ctx.table_meta())
    return {"grid": f"{len(grid.proxy_timesteps)}x{len(grid.target_timesteps)}"}


def cmd_export_plotdata(ctx: RunContext) -> dict:
    written = 0
    results_path = ctx.path("lds_results.csv")
    if results_path.exists():
        results, _ = read_table(results_path)
        damping = results[["method", "damping", "lds_mean", "lds_stderr"]]
        write_table(damping, ctx.path("plot_damping.csv"), ctx.table_meta())
        best = damping.sort_values(["method", "lds_mean"], ascending=[True, False], kind="stable")
        best = best.groupby("method", sort=True).head(1).reset_index(drop=True)
        write_table(best, ctx.path("plot_lds.csv"), ctx.table_meta())
        written += 2
    else:
        logger.warning("lds_results.csv not found; skipping damping and LDS plot tables")

    grid_path = ctx.path("timestep_grid.csv")
    if grid_path.exists():
        grid, _ = read_table(grid_path)
        pivot = grid.pivot(index="proxy_t", columns="target_t", values="lds")
        pivot.columns = [f"target_{c}" for c in pivot.columns]
        write_table(pivot.reset_index(), ctx.path("plot_timestep_grid.csv"), ctx.table_meta())
        written += 1
    else:
        logger.warning("timestep_grid.csv not found; skipping grid plot table")
    if not written:
        raise ContainerError("nothing to export; run lds-eval or timestep-grid first")
    return {"tables": written}


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "measure": cmd_measure,
    "factors": cmd_factors,
    "influence": cmd_influence,
    "cache": cmd_cache,
    "lds-make": cmd_lds_make,
    "lds-eval": cmd_lds_eval,
    "ablate-remove-top": cmd_ablate_remove_top,
    "timestep-grid": cmd_timestep_grid,
    "export-plotdata": cmd_export_plotdata,
}
