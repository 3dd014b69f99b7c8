"""Command-line entry point.

Every command reads an optional TOML config (``--config``); explicit flags
win over config values. Randomized commands insist on a seed from one of
the two. Outputs land in a run directory named ``<timestamp>-seed<seed>``
under ./runs unless ``--out`` overrides it. Exit codes: 0 success, 1
validation error, 2 runtime or transport error.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import augment as rda
from . import corpus as corpus_mod
from . import engine as engine_mod
from . import figures, metrics, retrieval
from .config import config_get, load_run_config
from .embedder import RefinedEmbeddingFile, WireEmbedderConfig, WireTextEmbedder
from .errors import FormatError, TireidError, ValidationError
from .oracle import (
    ScriptedBackend,
    SimulatedBackend,
    SimulatedOracleConfig,
    WireBackend,
    WireOracleConfig,
)
from .templates import load_templates


@click.group()
def cli():
    """Interactive re-ranking toolkit for text-to-image person re-id."""


def _pick(flag, config, section, key, default=None):
    if flag is not None:
        return flag
    return config_get(config, section, key, default)


def _require_seed(seed, config) -> int:
    value = _pick(seed, config, "", "seed")
    if value is None:
        raise ValidationError("a seed is required (--seed or config seed)")
    return int(value)


def _out_dir(out, seed) -> Path:
    if out is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{stamp}-seed{seed}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_corpus_and_matrices(config, annotations, image_emb, text_emb):
    ann = _pick(annotations, config, "paths", "annotations")
    img = _pick(image_emb, config, "paths", "image_embeddings")
    txt = _pick(text_emb, config, "paths", "text_embeddings")
    for name, value in (("annotations", ann), ("image embeddings", img),
                        ("text embeddings", txt)):
        if value is None:
            raise ValidationError(f"missing required input: {name}")
    image_matrix = corpus_mod.load_embeddings(img)
    text_matrix = corpus_mod.load_embeddings(txt)
    if image_matrix.shape[1] != text_matrix.shape[1]:
        raise ValidationError(
            f"embedding dim mismatch: images {image_matrix.shape[1]}, "
            f"texts {text_matrix.shape[1]}"
        )
    corpus = corpus_mod.load_annotations(
        ann, num_image_rows=image_matrix.shape[0], num_text_rows=text_matrix.shape[0]
    )
    return corpus, image_matrix, text_matrix


_config_option = click.option(
    "--config", "config_path", type=click.Path(), default=None,
    help="TOML run configuration; flags override it.",
)


@cli.command()
@_config_option
@click.option("--num-identities", type=int, default=None)
@click.option("--images-per-identity", type=int, default=None)
@click.option("--texts-per-identity", type=int, default=None)
@click.option("--dim", type=int, default=None)
@click.option("--noise-sigma", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def simgen(config_path, num_identities, images_per_identity, texts_per_identity,
           dim, noise_sigma, seed, out):
    """Generate a synthetic benchmark corpus plus both embedding files."""
    config = load_run_config(config_path)
    seed = _require_seed(seed, config)
    cfg = corpus_mod.SyntheticBenchConfig(
        num_identities=num_identities if num_identities is not None else 50,
        images_per_identity=images_per_identity if images_per_identity is not None else 2,
        texts_per_identity=texts_per_identity if texts_per_identity is not None else 1,
        dim=dim if dim is not None else 64,
        noise_sigma=noise_sigma if noise_sigma is not None else 0.4,
        seed=seed,
    )
    corpus, image_matrix, text_matrix = corpus_mod.generate_synthetic_benchmark(cfg)
    out_dir = _out_dir(out, seed)
    corpus_mod.save_annotations(corpus, out_dir / "annotations.json")
    corpus_mod.save_embeddings(image_matrix, out_dir / "images.icle")
    corpus_mod.save_embeddings(text_matrix, out_dir / "texts.icle")
    click.echo(
        f"simgen: {len(corpus.images)} images, {len(corpus.texts)} texts, "
        f"dim {cfg.dim} -> {out_dir}"
    )


@cli.command()
@_config_option
@click.option("--annotations", type=click.Path(), default=None)
@click.option("--image-embeddings", type=click.Path(), default=None)
@click.option("--text-embeddings", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
def ingest(config_path, annotations, image_embeddings, text_embeddings, out):
    """Validate a corpus against its embedding matrices."""
    config = load_run_config(config_path)
    corpus, image_matrix, text_matrix = _load_corpus_and_matrices(
        config, annotations, image_embeddings, text_embeddings
    )
    manifest = {
        "images": len(corpus.images),
        "texts": len(corpus.texts),
        "identities": len({img.person_id for img in corpus.images}),
        "image_rows": int(image_matrix.shape[0]),
        "text_rows": int(text_matrix.shape[0]),
        "dim": int(image_matrix.shape[1]),
    }
    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
        )
    click.echo("ingest: " + json.dumps(manifest, separators=(",", ":")))


@cli.command()
@_config_option
@click.option("--annotations", type=click.Path(), default=None)
@click.option("--image-embeddings", type=click.Path(), default=None)
@click.option("--text-embeddings", type=click.Path(), default=None)
@click.option("--top", type=int, default=None,
              help="Truncate exported rankings to the first N entries.")
@click.option("--out", type=click.Path(), default=None)
def retrieve(config_path, annotations, image_embeddings, text_embeddings, top, out):
    """Rank the whole gallery for every query and export JSONL."""
    config = load_run_config(config_path)
    corpus, image_matrix, text_matrix = _load_corpus_and_matrices(
        config, annotations, image_embeddings, text_embeddings
    )
    rankings = retrieval.full_ranking(text_matrix, image_matrix)
    out_dir = _out_dir(out, config_get(config, "", "seed", 0))
    retrieval.write_rankings_jsonl(rankings, out_dir / "rankings.jsonl", truncate=top)
    click.echo(f"retrieve: {len(rankings)} queries -> {out_dir / 'rankings.jsonl'}")


@cli.command()
@_config_option
@click.option("--rankings", "rankings_path", type=click.Path(), required=True)
@click.option("--annotations", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
def evaluate(config_path, rankings_path, annotations, out):
    """Score rankings with CMC Rank-K, mAP, and mINP."""
    config = load_run_config(config_path)
    ann = _pick(annotations, config, "paths", "annotations")
    if ann is None:
        raise ValidationError("missing required input: annotations")
    corpus = corpus_mod.load_annotations(ann)
    judgments = corpus_mod.relevant_galleries(corpus)
    rankings = retrieval.read_rankings_jsonl(rankings_path)
    report = metrics.evaluate(rankings, judgments)
    out_dir = _out_dir(out, config_get(config, "", "seed", 0))
    metrics.write_report_json(report, out_dir / "report.json")
    figures.render_report(report, out_dir / "report.png")
    click.echo("evaluate: " + json.dumps(report.to_dict(), separators=(",", ":")))


@cli.command()
@_config_option
@click.option("--rankings", "rankings_path", type=click.Path(), required=True)
@click.option("--annotations", type=click.Path(), default=None)
@click.option("--bins", type=int, default=20, show_default=True)
@click.option("--lo", type=float, default=0.0, show_default=True)
@click.option("--hi", type=float, default=1.0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def stats(config_path, rankings_path, annotations, bins, lo, hi, out):
    """Top-1 similarity histogram split by retrieval correctness."""
    config = load_run_config(config_path)
    ann = _pick(annotations, config, "paths", "annotations")
    if ann is None:
        raise ValidationError("missing required input: annotations")
    corpus = corpus_mod.load_annotations(ann)
    judgments = corpus_mod.relevant_galleries(corpus)
    rankings = retrieval.read_rankings_jsonl(rankings_path)
    edges = np.linspace(lo, hi, bins + 1)
    hist = metrics.top1_similarity_stats(rankings, judgments, edges)
    out_dir = _out_dir(out, config_get(config, "", "seed", 0))
    metrics.write_histogram_csv(hist, out_dir / "histogram.csv")
    figures.render_top1_histogram(hist, out_dir / "histogram.png")
    mean_c, mean_i = metrics.mean_top1_by_correctness(rankings, judgments)
    click.echo(
        f"stats: {hist.num_queries} queries, mean top-1 similarity "
        f"correct={mean_c} incorrect={mean_i} -> {out_dir}"
    )


def _build_oracle(config, backend, oracle_endpoint, model, script, template_dir,
                  p, beta, seed, word_cap, text_matrix, image_matrix):
    backend = _pick(backend, config, "oracle", "backend", "simulated")
    templates = load_templates(_pick(template_dir, config, "oracle", "template_dir"))
    word_cap = int(_pick(word_cap, config, "oracle", "word_cap", 120))
    if backend == "simulated":
        sim_cfg = SimulatedOracleConfig(
            localization_accuracy=float(_pick(p, config, "oracle", "p", 1.0)),
            refinement_strength=float(_pick(beta, config, "oracle", "beta", 0.5)),
            seed=seed,
        )
        return SimulatedBackend(sim_cfg, text_matrix, image_matrix)
    if backend == "scripted":
        script = _pick(script, config, "oracle", "script")
        if script is None:
            raise ValidationError("scripted backend needs --script")
        return ScriptedBackend.from_file(script, templates=templates, word_cap=word_cap)
    if backend == "wire":
        endpoint = _pick(oracle_endpoint, config, "oracle", "endpoint")
        model = _pick(model, config, "oracle", "model")
        if endpoint is None or model is None:
            raise ValidationError("wire backend needs --oracle-endpoint and --model")
        wire_cfg = WireOracleConfig(
            endpoint=endpoint,
            model=model,
            api_key_env=config_get(config, "oracle", "api_key_env", "TIREID_API_KEY"),
            timeout=float(config_get(config, "oracle", "timeout", 60.0)),
            max_retries=int(config_get(config, "oracle", "max_retries", 3)),
        )
        return WireBackend(wire_cfg, templates=templates, word_cap=word_cap)
    raise ValidationError(f"unknown backend {backend!r}")


def _build_embedding_source(config, embedder_endpoint, embedder_model, refined_path):
    refined_path = _pick(refined_path, config, "embedder", "refined_embeddings")
    if refined_path is not None:
        return RefinedEmbeddingFile.load(refined_path)
    endpoint = _pick(embedder_endpoint, config, "embedder", "endpoint")
    if endpoint is not None:
        model = _pick(embedder_model, config, "embedder", "model")
        if model is None:
            raise ValidationError("embedder endpoint needs --embedder-model")
        return WireTextEmbedder(
            WireEmbedderConfig(
                endpoint=endpoint,
                model=model,
                api_key_env=config_get(config, "embedder", "api_key_env", "TIREID_API_KEY"),
            )
        )
    return None


@cli.command()
@_config_option
@click.option("--annotations", type=click.Path(), default=None)
@click.option("--image-embeddings", type=click.Path(), default=None)
@click.option("--text-embeddings", type=click.Path(), default=None)
@click.option("--rounds", type=int, default=None)
@click.option("--xi", type=str, default=None,
              help="Similarity threshold, or 'median' for the baseline median.")
@click.option("--lambda", "lam", type=float, default=None)
@click.option("--candidate-size", type=int, default=None)
@click.option("--max-inflight", type=int, default=None)
@click.option("--pin-literal-top1", is_flag=True, default=False)
@click.option("--unconditional", is_flag=True, default=False)
@click.option("--backend", type=click.Choice(["wire", "scripted", "simulated"]),
              default=None)
@click.option("--oracle-endpoint", type=str, default=None)
@click.option("--model", type=str, default=None)
@click.option("--script", type=click.Path(), default=None)
@click.option("--template-dir", type=click.Path(), default=None)
@click.option("--p", type=float, default=None, help="Simulated localization accuracy.")
@click.option("--beta", type=float, default=None, help="Simulated refinement strength.")
@click.option("--word-cap", type=int, default=None)
@click.option("--embedder-endpoint", type=str, default=None)
@click.option("--embedder-model", type=str, default=None)
@click.option("--refined-embeddings", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def interact(config_path, annotations, image_embeddings, text_embeddings, rounds, xi,
             lam, candidate_size, max_inflight, pin_literal_top1, unconditional,
             backend, oracle_endpoint, model, script, template_dir, p, beta, word_cap,
             embedder_endpoint, embedder_model, refined_embeddings, seed, out):
    """Run the interaction loop and fusion re-ranking over every query."""
    config = load_run_config(config_path)
    seed = _require_seed(seed, config)
    corpus, image_matrix, text_matrix = _load_corpus_and_matrices(
        config, annotations, image_embeddings, text_embeddings
    )
    baseline = retrieval.full_ranking(text_matrix, image_matrix)
    xi = _pick(xi, config, "thi", "xi", 0.55)
    if isinstance(xi, str):
        if xi == "median":
            xi = engine_mod.median_top1_similarity(baseline)
        else:
            try:
                xi = float(xi)
            except ValueError:
                raise ValidationError(f"--xi must be a number or 'median', got {xi!r}")
    thi = engine_mod.ThiConfig(
        rounds=int(_pick(rounds, config, "thi", "rounds", 5)),
        similarity_threshold=float(xi),
        fusion_weight=float(_pick(lam, config, "thi", "lambda", 0.8)),
        candidate_size=_pick(candidate_size, config, "thi", "candidate_size"),
        max_inflight_oracle_calls=int(_pick(max_inflight, config, "thi", "max_inflight", 4)),
        pin_literal_top1=pin_literal_top1
        or bool(config_get(config, "thi", "pin_literal_top1", False)),
        unconditional_localization=unconditional
        or bool(config_get(config, "thi", "unconditional_localization", False)),
    )
    oracle = _build_oracle(config, backend, oracle_endpoint, model, script,
                           template_dir, p, beta, seed, word_cap,
                           text_matrix, image_matrix)
    source = _build_embedding_source(config, embedder_endpoint, embedder_model,
                                     refined_embeddings)
    result = engine_mod.run_batch(
        corpus, text_matrix, image_matrix, oracle, thi,
        embedding_source=source, baseline_rankings=baseline,
    )
    out_dir = _out_dir(out, seed)
    retrieval.write_rankings_jsonl(
        [r.fused_ranking for r in result.reranked], out_dir / "reranked.jsonl"
    )
    engine_mod.write_trace_jsonl(result.traces, out_dir / "trace.jsonl")
    metrics.write_report_json(result.report_before, out_dir / "report_before.json")
    metrics.write_report_json(result.report_after, out_dir / "report_after.json")
    figures.render_report_comparison(
        result.report_before, result.report_after, out_dir / "comparison.png"
    )
    click.echo(
        f"interact: xi={thi.similarity_threshold:.6f} refined={result.refined_count} "
        f"oracle_calls={result.total_oracle_calls} "
        f"rank1 {result.report_before.rank1:.4f}->{result.report_after.rank1:.4f} "
        f"mAP {result.report_before.mAP:.4f}->{result.report_after.mAP:.4f} "
        f"-> {out_dir}"
    )


@cli.command("augment")
@_config_option
@click.option("--annotations", type=click.Path(), default=None)
@click.option("--backend", type=click.Choice(["wire", "scripted"]), default=None)
@click.option("--oracle-endpoint", type=str, default=None)
@click.option("--model", type=str, default=None)
@click.option("--script", type=click.Path(), default=None)
@click.option("--template-dir", type=click.Path(), default=None)
@click.option("--word-cap", type=int, default=None)
@click.option("--m", "m", type=int, default=None, help="Style variants per sub-sentence.")
@click.option("--per-text-count", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def augment_cmd(config_path, annotations, backend, oracle_endpoint, model, script,
                template_dir, word_cap, m, per_text_count, seed, out):
    """Enrich, decompose, rewrite, and reorganize every training text."""
    config = load_run_config(config_path)
    seed = _require_seed(seed, config)
    ann = _pick(annotations, config, "paths", "annotations")
    if ann is None:
        raise ValidationError("missing required input: annotations")
    corpus = corpus_mod.load_annotations(ann)
    backend_name = _pick(backend, config, "oracle", "backend", "scripted")
    if backend_name == "simulated":
        raise ValidationError("augmentation needs a text backend (wire or scripted)")
    oracle = _build_oracle(config, backend_name, oracle_endpoint, model, script,
                           template_dir, None, None, seed, word_cap, None, None)
    rows, stats_out = rda.generate_augmented_corpus(
        corpus, oracle,
        m=int(_pick(m, config, "rda", "m", 3)),
        per_text_count=int(_pick(per_text_count, config, "rda", "per_text_count", 4)),
        seed=seed,
    )
    out_dir = _out_dir(out, seed)
    rda.write_augmented_jsonl(rows, out_dir / "augmented.jsonl")
    click.echo(
        f"augment: {stats_out.texts_processed} texts, "
        f"{stats_out.augmentations} augmentations, "
        f"{stats_out.texts_skipped} skipped -> {out_dir / 'augmented.jsonl'}"
    )


@cli.command("sft-export")
@_config_option
@click.option("--annotations", type=click.Path(), default=None)
@click.option("--rankings", "rankings_path", type=click.Path(), required=True)
@click.option("--n-l", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def sft_export(config_path, annotations, rankings_path, n_l, seed, out):
    """Build and export the Yes/No localization fine-tuning dataset."""
    config = load_run_config(config_path)
    seed = _require_seed(seed, config)
    ann = _pick(annotations, config, "paths", "annotations")
    if ann is None:
        raise ValidationError("missing required input: annotations")
    corpus = corpus_mod.load_annotations(ann)
    rankings = retrieval.read_rankings_jsonl(rankings_path)
    dataset = rda.build_sft_dataset(
        corpus, rankings, n_l=_pick(n_l, config, "rda", "n_l"), seed=seed
    )
    out_dir = _out_dir(out, seed)
    rda.export_sft(dataset, out_dir / "sft.json")
    click.echo(
        f"sft-export: {dataset.num_positive} positive + {dataset.num_negative} "
        f"negative samples -> {out_dir / 'sft.json'}"
    )


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        if exc.exit_code != 0:
            sys.exit(exc.exit_code)
        return 0
    except click.ClickException as exc:
        print(f"error[validation]: {exc.format_message()}", file=sys.stderr)
        sys.exit(1)
    except click.Abort:
        sys.exit(130)
    except (ValidationError, FormatError) as exc:
        print(f"error[validation]: {exc}", file=sys.stderr)
        sys.exit(1)
    except TireidError as exc:
        print(f"error[runtime]: {exc}", file=sys.stderr)
        sys.exit(2)
    except OSError as exc:
        print(f"error[runtime]: {exc}", file=sys.stderr)
        sys.exit(2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
