"""
Main entry point for latentmatch

    latentmatch <subcommand> [--option=value ...]

Every subcommand owns a tornado ``OptionParser``; ``--option value`` is
accepted as well as ``--option=value``. Defaults come from the settings
file (``config.json``), flags override them.
"""

import hashlib
import json
import logging
import os
import sys
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Dict, List, Optional

from tornado.options import Error as OptionsError
from tornado.options import OptionParser

from . import __version__
from .corpus import (DOCUMENTS_FILE, QUERY_FREQ_FILE, build_corpus_bundle, load_bundle,
                     read_click_log, read_documents, read_query_frequencies, save_bundle,
                     vectorize_document)
from .evaluation import (compare_runs, evaluate_run, format_report, read_judgments,
                         write_report_csv)
from .exceptions import ConfigError, DataError, LatentMatchError, NumericalError
from .knowledge import (ClickGraph, build_knowledge_matrix, knowledge_triples, mine_synonyms,
                        mine_tag_terms, read_synonyms, read_tag_terms, read_tags, write_synonyms,
                        write_tag_terms)
from .logger import resident_memory_bytes, setup_logging
from .parallel import resolve_workers
from .scorer import (DocumentCollection, Model, Ranker, ScoreMode, nearest_terms, read_candidates,
                     read_queries, read_rankings, write_rankings)
from .settings import load_settings
from .trainer import MappingPair, TrainConfig, load_model, save_model, train, write_trace
from .tsv import write_tsv

logger = logging.getLogger(__name__)

PROG = "latentmatch"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# Options that never change what a run produces
UNHASHED_OPTIONS = {"help", "threads", "manifest", "log_dir", "debug"}


class SubcommandParser:
    """tornado OptionParser that also takes ``--name value`` for non-bool options"""

    def __init__(self, name: str):
        self.name = name
        self.options = OptionParser()
        self._known = {"help"}
        self._flags = {"help"}

    def define(self, name: str, default=None, type=str, help: Optional[str] = None,
               multiple: bool = False, group: Optional[str] = None):
        self.options.define(name, default=default, type=type, help=help, multiple=multiple,
                            group=group or self.name)
        normalized = name.replace('_', '-')
        self._known.add(normalized)
        if type is bool:
            self._flags.add(normalized)

    def _joined(self, argv: List[str]) -> List[str]:
        args = []
        i = 0
        while i < len(argv):
            arg = argv[i]
            if arg.startswith('-') and '=' not in arg:
                name = arg.lstrip('-').replace('_', '-')
                if name in self._known and name not in self._flags and i + 1 < len(argv):
                    args.append(f"{arg}={argv[i + 1]}")
                    i += 2
                    continue
            args.append(arg)
            i += 1
        return args

    def parse(self, argv: List[str]) -> OptionParser:
        remaining = self.options.parse_command_line([f"{PROG} {self.name}"] + self._joined(argv))
        if remaining:
            raise ConfigError(f"unexpected arguments: {' '.join(remaining)}")
        return self.options


class Pipeline:
    """Provenance of one subcommand run

    The config hash covers the subcommand, its options and the settings in
    effect; every text output starts with it and the manifest records it
    with the input and output paths.
    """

    def __init__(self, subcommand: str, options: Dict, settings: Dict, workers: int):
        self.subcommand = subcommand
        self.options = options
        self.settings = settings
        self.workers = workers
        self.config_hash = config_hash(subcommand, options, settings)
        self.inputs: Dict[str, str] = OrderedDict()
        self.outputs: Dict[str, str] = OrderedDict()
        self.started_at = datetime.now().isoformat(timespec='seconds')
        self.peak_rss = resident_memory_bytes()

    @property
    def header(self) -> str:
        return f"config_hash={self.config_hash}"

    def add_input(self, name: str, path: Optional[str]):
        if path:
            self.inputs[name] = path

    def add_output(self, name: str, path: Optional[str]):
        if path:
            self.outputs[name] = path
        self.sample_memory()

    def sample_memory(self):
        self.peak_rss = max(self.peak_rss, resident_memory_bytes())

    def manifest(self) -> Dict:
        self.sample_memory()
        return OrderedDict([
            ("tool", PROG),
            ("version", __version__),
            ("subcommand", self.subcommand),
            ("config_hash", self.config_hash),
            ("options", {k: v for k, v in sorted(self.options.items()) if k != "help"}),
            ("inputs", dict(self.inputs)),
            ("outputs", dict(self.outputs)),
            ("started_at", self.started_at),
            ("finished_at", datetime.now().isoformat(timespec='seconds')),
            ("workers", self.workers),
            ("peak_rss_bytes", self.peak_rss),
        ])

    def write_manifest(self, path: str):
        directory = os.path.dirname(path)
        if directory and not os.path.exists(directory):
            os.makedirs(directory)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.manifest(), f, indent=2, default=str)
            f.write('\n')
        logger.info(f"Wrote manifest to {path}")


def config_hash(subcommand: str, options: Dict, settings: Dict) -> str:
    payload = {
        "subcommand": subcommand,
        "options": {k: v for k, v in options.items() if k not in UNHASHED_OPTIONS},
        "settings": settings,
    }
    encoded = json.dumps(payload, sort_keys=True, default=str).encode('utf-8')
    return hashlib.sha256(encoded).hexdigest()


def _required(opts: OptionParser, name: str) -> str:
    value = getattr(opts, name)
    if value is None or value == "":
        raise ConfigError(f"--{name.replace('_', '-')} is required")
    return value


def _pick(value, default):
    return default if value is None else value


# ---------------------------------------------------------------------------
# build-corpus
# ---------------------------------------------------------------------------

def define_build_corpus(cmd: SubcommandParser):
    cmd.define("clicks", type=str, help="Click log TSV: query, doc_id, doc_title, clicks")
    cmd.define("out", type=str, help="Output corpus directory")
    cmd.define("tags", type=str, help="doc_id<TAB>tag1,tag2 file; tags join the vocabulary as tag:<name>")
    cmd.define("min_count", type=int, help="Minimum term occurrences to enter the vocabulary")
    cmd.define("chunk_size", type=int, help="Pairs per cross-covariance accumulation chunk")


def run_build_corpus(opts: OptionParser, pipeline: Pipeline):
    clicks = _required(opts, "clicks")
    out = _required(opts, "out")
    section = pipeline.settings["corpus"]
    pipeline.add_input("clicks", clicks)
    pipeline.add_input("tags", opts.tags)

    records = read_click_log(clicks)
    tags = read_tags(opts.tags) if opts.tags else None
    bundle = build_corpus_bundle(records, min_count=_pick(opts.min_count, section["min_count"]),
                                 tags=tags, workers=pipeline.workers,
                                 chunk_size=_pick(opts.chunk_size, section["chunk_size"]))
    for name, path in save_bundle(bundle, out, header=pipeline.header).items():
        pipeline.add_output(name, path)


# ---------------------------------------------------------------------------
# mine-synonyms / mine-tags
# ---------------------------------------------------------------------------

def define_mine_synonyms(cmd: SubcommandParser):
    cmd.define("clicks", type=str, help="Click log TSV")
    cmd.define("out", type=str, help="Output synonym TSV: term1, term2, support, weight")
    cmd.define("top_k", type=int, help="Number of synonym pairs to keep")
    cmd.define("scale", type=float, help="Logistic weight scale")
    cmd.define("min_support", type=int, default=1, help="Drop pairs with lower support")


def run_mine_synonyms(opts: OptionParser, pipeline: Pipeline):
    clicks = _required(opts, "clicks")
    out = _required(opts, "out")
    section = pipeline.settings["knowledge"]
    pipeline.add_input("clicks", clicks)

    graph = ClickGraph.from_records(read_click_log(clicks))
    pairs = mine_synonyms(graph, k=_pick(opts.top_k, section["synonym_top_k"]),
                          scale=_pick(opts.scale, section["logistic_scale"]),
                          min_support=opts.min_support, workers=pipeline.workers)
    write_synonyms(out, pairs, header=pipeline.header)
    pipeline.add_output("synonyms", out)


def define_mine_tags(cmd: SubcommandParser):
    cmd.define("corpus", type=str, help="Corpus directory from build-corpus")
    cmd.define("tags", type=str, help="doc_id<TAB>tag1,tag2 file")
    cmd.define("out", type=str, help="Output TSV: tag, term, weight")
    cmd.define("top_k", type=int, help="Terms kept per tag")


def run_mine_tags(opts: OptionParser, pipeline: Pipeline):
    corpus = _required(opts, "corpus")
    tags_path = _required(opts, "tags")
    out = _required(opts, "out")
    pipeline.add_input("corpus", corpus)
    pipeline.add_input("tags", tags_path)

    bundle = load_bundle(corpus)
    doc_vectors = {doc_id: vectorize_document(title, bundle.vocab, bundle.idf)
                   for doc_id, title in bundle.titles.items()}
    pairs = mine_tag_terms(doc_vectors, read_tags(tags_path), bundle.vocab,
                           k=_pick(opts.top_k, pipeline.settings["knowledge"]["tag_top_k"]))
    write_tag_terms(out, pairs, header=pipeline.header)
    pipeline.add_output("tag_terms", out)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def define_train(cmd: SubcommandParser):
    cmd.define("corpus", type=str, help="Corpus directory from build-corpus")
    cmd.define("clicks", type=str, help="Click log TSV; builds the corpus on the fly")
    cmd.define("corpus_dir", type=str, help="Where --clicks writes its corpus (default: <out>.corpus)")
    cmd.define("tags", type=str, help="Tags file injected into a corpus built from --clicks")
    cmd.define("synonyms", type=str, help="Synonym TSV; builds the query-side knowledge matrix")
    cmd.define("tag_terms", type=str, help="Tag-term TSV; builds the document-side knowledge matrix")
    cmd.define("config", type=str, help="key=value training config file")
    cmd.define("warm_start", type=str, help="Model file to start from")
    cmd.define("out", type=str, help="Output model file")
    cmd.define("trace", type=str, help="Objective trace CSV (default: <out>.trace.csv)")
    cmd.define("dim", type=int, help="Latent dimension d")
    cmd.define("theta2", type=float, help="Penalty on ||Lx^T Ly||^2")
    cmd.define("lambda2", type=float, help="Penalty on ||Lx||^2")
    cmd.define("rho2", type=float, help="Penalty on ||Ly||^2")
    cmd.define("alpha", type=float, help="Weight of the query-side knowledge term")
    cmd.define("beta", type=float, help="Weight of the document-side knowledge term")
    cmd.define("gamma", type=float, help="Gradient descent step size")
    cmd.define("max_iters", type=int, help="Iteration limit")
    cmd.define("tol", type=float, help="Relative objective change at which training stops")
    cmd.define("method", type=str, help="cd|gd (coordinate or gradient descent)")
    cmd.define("sweep", type=str, help="Coordinate sweep: gauss_seidel|jacobi")
    cmd.define("block_size", type=int, help="Columns per parallel solve block")


def train_config(opts: OptionParser, pipeline: Pipeline,
                 warm_start: Optional[MappingPair] = None) -> TrainConfig:
    """Settings, then the --config file, then flags

    A warm start keeps its own latent dimension and gets the shorter warm
    iteration limit unless either is set explicitly.
    """
    section = pipeline.settings["training"]
    values = {
        "d": section["dim"], "theta2": section["theta2"], "lambda2": section["lambda2"],
        "rho2": section["rho2"], "alpha": section["alpha"], "beta": section["beta"],
        "gamma": section["gamma"], "max_iters": section["max_iters"], "tol": section["tol"],
        "seed": section["seed"], "method": section["method"], "sweep": section["sweep"],
        "block_size": section["block_size"],
    }
    max_iters_given = opts.max_iters is not None
    dim_given = opts.dim is not None
    if opts.config:
        pipeline.add_input("config", opts.config)
        file_values = TrainConfig.read_values(opts.config)
        max_iters_given = max_iters_given or "max_iters" in file_values
        dim_given = dim_given or "d" in file_values
        values.update(file_values)

    flags = {
        "d": opts.dim, "theta2": opts.theta2, "lambda2": opts.lambda2, "rho2": opts.rho2,
        "alpha": opts.alpha, "beta": opts.beta, "gamma": opts.gamma, "max_iters": opts.max_iters,
        "tol": opts.tol, "seed": opts.seed, "method": opts.method, "sweep": opts.sweep,
        "block_size": opts.block_size,
    }
    values.update((key, value) for key, value in flags.items() if value is not None)
    if warm_start is not None:
        if not max_iters_given:
            values["max_iters"] = section["warm_start_max_iters"]
        if not dim_given:
            values["d"] = warm_start.d
    values["workers"] = pipeline.workers
    return TrainConfig(**values).validate()


def _training_corpus(opts: OptionParser, pipeline: Pipeline, warm_vocab_path: Optional[str]):
    if opts.corpus:
        pipeline.add_input("corpus", opts.corpus)
        return load_bundle(opts.corpus)

    if opts.clicks:
        pipeline.add_input("clicks", opts.clicks)
        pipeline.add_input("tags", opts.tags)
        section = pipeline.settings["corpus"]
        records = read_click_log(opts.clicks)
        tags = read_tags(opts.tags) if opts.tags else None
        bundle = build_corpus_bundle(records, min_count=section["min_count"], tags=tags,
                                     workers=pipeline.workers, chunk_size=section["chunk_size"])
        directory = opts.corpus_dir or f"{opts.out}.corpus"
        for name, path in save_bundle(bundle, directory, header=pipeline.header).items():
            pipeline.add_output(name, path)
        return bundle

    if warm_vocab_path:
        directory = os.path.dirname(warm_vocab_path) or "."
        logger.info(f"Using the warm-start model's corpus at {directory}")
        pipeline.add_input("corpus", directory)
        return load_bundle(directory)

    raise ConfigError("train needs --corpus, --clicks or --warm-start")


def run_train(opts: OptionParser, pipeline: Pipeline):
    out = _required(opts, "out")
    warm_start = None
    warm_vocab_path = None
    if opts.warm_start:
        pipeline.add_input("warm_start", opts.warm_start)
        warm_start, warm_vocab_path = load_model(opts.warm_start)
    config = train_config(opts, pipeline, warm_start)

    bundle = _training_corpus(opts, pipeline, warm_vocab_path)

    Rx = Ry = None
    if opts.synonyms:
        pipeline.add_input("synonyms", opts.synonyms)
        Rx = build_knowledge_matrix(knowledge_triples(synonyms=read_synonyms(opts.synonyms)), bundle.vocab)
    if opts.tag_terms:
        pipeline.add_input("tag_terms", opts.tag_terms)
        Ry = build_knowledge_matrix(knowledge_triples(tag_terms=read_tag_terms(opts.tag_terms)), bundle.vocab)
    if config.alpha > 0 and Rx is None:
        logger.warning("--alpha has no effect without --synonyms")
    if config.beta > 0 and Ry is None:
        logger.warning("--beta has no effect without --tag-terms")

    pipeline.sample_memory()
    mappings, report = train(bundle.cov, Rx, Ry, config, warm_start)

    save_model(out, mappings, os.path.abspath(bundle.vocab_path))
    pipeline.add_output("model", out)
    trace = opts.trace or f"{out}.trace.csv"
    write_trace(trace, report, header=pipeline.header)
    pipeline.add_output("trace", trace)
    logger.info(f"Saved model to {out} after {report.iterations} iterations "
                f"({'converged' if report.converged else 'iteration limit'})")


# ---------------------------------------------------------------------------
# rank / evaluate / neighbors
# ---------------------------------------------------------------------------

def _define_ranking(cmd: SubcommandParser):
    cmd.define("model", type=str, help="Model file from train")
    cmd.define("candidates", type=str, help="query<TAB>doc_id lists to re-rank per query")
    cmd.define("documents", type=str, help="doc_id<TAB>title collection (default: the model's corpus)")
    cmd.define("mode", type=str, help="latent|combined|bm25")
    cmd.define("top_k", type=int, help="Documents returned per query")
    cmd.define("term_filter", type=bool, default=False,
               help="bm25 mode: only rank documents sharing a query term")
    cmd.define("k1", type=float, help="BM25 k1")
    cmd.define("b", type=float, help="BM25 b")


def _ranker(opts: OptionParser, pipeline: Pipeline) -> Ranker:
    model_path = _required(opts, "model")
    pipeline.add_input("model", model_path)
    model = Model.load(model_path)
    if opts.documents:
        documents = opts.documents
    else:
        documents = os.path.join(model.bundle_directory, DOCUMENTS_FILE)
    pipeline.add_input("documents", documents)
    collection = DocumentCollection.build(read_documents(documents), model.vocab, model.load_idf())
    section = pipeline.settings["ranking"]
    return Ranker(model, collection, k1=_pick(opts.k1, section["k1"]), b=_pick(opts.b, section["b"]))


def _candidates(opts: OptionParser, pipeline: Pipeline) -> Optional[Dict[str, List[str]]]:
    if not opts.candidates:
        return None
    pipeline.add_input("candidates", opts.candidates)
    return read_candidates(opts.candidates)


def define_rank(cmd: SubcommandParser):
    _define_ranking(cmd)
    cmd.define("queries", type=str, help="One query per line (first TSV field)")
    cmd.define("out", type=str, help="Output TSV: query, rank, doc_id, score")


def run_rank(opts: OptionParser, pipeline: Pipeline):
    out = _required(opts, "out")
    candidates = _candidates(opts, pipeline)
    if opts.queries:
        pipeline.add_input("queries", opts.queries)
        queries = read_queries(opts.queries)
    elif candidates is not None:
        queries = list(candidates)
    else:
        raise ConfigError("rank needs --queries or --candidates")

    section = pipeline.settings["ranking"]
    mode = ScoreMode.parse(_pick(opts.mode, section["mode"]))
    ranker = _ranker(opts, pipeline)
    rankings = ranker.rank_all(queries, _pick(opts.top_k, section["top_k"]), mode,
                               candidates=candidates, term_filter=opts.term_filter,
                               workers=pipeline.workers)
    write_rankings(out, rankings, header=pipeline.header)
    pipeline.add_output("rankings", out)


def define_evaluate(cmd: SubcommandParser):
    _define_ranking(cmd)
    cmd.define("judgments", type=str, help="query<TAB>doc_id<TAB>label judgments (labels 0-3)")
    cmd.define("run", type=str, help="Evaluate an existing rankings file instead of ranking")
    cmd.define("cutoffs", type=int, multiple=True, help="NDCG cutoffs, comma separated")
    cmd.define("frequencies", type=str, help="query<TAB>count file for the head/tail split")
    cmd.define("baseline_mode", type=str, help="Compare against this mode with a paired t-test")
    cmd.define("ideal_from_judgments", type=bool, default=None,
               help="Build the ideal ranking from every judged label, not only the ranked ones")
    cmd.define("out", type=str, help="Report CSV: split, cutoff, ndcg, n_queries")


def _frequencies(opts: OptionParser, pipeline: Pipeline, ranker: Optional[Ranker]):
    if opts.frequencies:
        pipeline.add_input("frequencies", opts.frequencies)
        return read_query_frequencies(opts.frequencies)
    if ranker is not None:
        path = os.path.join(ranker.model.bundle_directory, QUERY_FREQ_FILE)
        if os.path.exists(path):
            pipeline.add_input("frequencies", path)
            return read_query_frequencies(path)
    logger.warning("No query frequencies available, reporting the 'all' split only")
    return None


def run_evaluate(opts: OptionParser, pipeline: Pipeline):
    judgments_path = _required(opts, "judgments")
    pipeline.add_input("judgments", judgments_path)
    judgments = read_judgments(judgments_path)
    section = pipeline.settings["ranking"]
    cutoffs = opts.cutoffs or pipeline.settings["evaluation"]["cutoffs"]
    top_k = _pick(opts.top_k, section["top_k"])

    ranker = None
    baseline = None
    if opts.run:
        pipeline.add_input("run", opts.run)
        rankings = read_rankings(opts.run)
        if opts.baseline_mode:
            raise ConfigError("--baseline-mode needs --model, not --run")
    else:
        ranker = _ranker(opts, pipeline)
        candidates = _candidates(opts, pipeline)
        queries = list(candidates) if candidates is not None else list(judgments)
        mode = ScoreMode.parse(_pick(opts.mode, section["mode"]))
        rankings = ranker.rank_all(queries, top_k, mode, candidates=candidates,
                                   term_filter=opts.term_filter, workers=pipeline.workers)
        if opts.baseline_mode:
            baseline = ranker.rank_all(queries, top_k, ScoreMode.parse(opts.baseline_mode),
                                       candidates=candidates, term_filter=opts.term_filter,
                                       workers=pipeline.workers)

    frequencies = _frequencies(opts, pipeline, ranker)
    ideal_from_judgments = _pick(opts.ideal_from_judgments,
                                 pipeline.settings["evaluation"]["ideal_from_judgments"])
    report = evaluate_run(rankings, judgments, cutoffs, frequencies, workers=pipeline.workers,
                          ideal_from_judgments=ideal_from_judgments)

    comparison = None
    if baseline is not None:
        baseline_report = evaluate_run(baseline, judgments, cutoffs, frequencies,
                                       ideal_from_judgments=ideal_from_judgments)
        try:
            comparison = compare_runs(report, baseline_report)
        except ValueError as e:
            logger.warning(f"Skipping significance test: {e}")

    print(format_report(report, comparison))
    if opts.out:
        write_report_csv(opts.out, report, header=pipeline.header)
        pipeline.add_output("report", opts.out)


def define_neighbors(cmd: SubcommandParser):
    cmd.define("model", type=str, help="Model file from train")
    cmd.define("term", type=str, help="Term to inspect")
    cmd.define("top_k", type=int, default=10, help="Neighbours to list")
    cmd.define("space", type=str, default="x", help="x (query mapping) or y (document mapping)")
    cmd.define("out", type=str, help="Optional TSV output: term, cosine")


def run_neighbors(opts: OptionParser, pipeline: Pipeline):
    model_path = _required(opts, "model")
    term = _required(opts, "term")
    pipeline.add_input("model", model_path)
    neighbours = nearest_terms(Model.load(model_path), term.lower(), opts.top_k, opts.space)
    rows = [(name, f"{cosine:.6f}") for name, cosine in neighbours]
    for name, cosine in rows:
        print(f"{name}\t{cosine}")
    if opts.out:
        write_tsv(opts.out, rows, header=pipeline.header)
        pipeline.add_output("neighbors", opts.out)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

@dataclass
class Subcommand:
    help: str
    define: Callable[[SubcommandParser], None]
    run: Callable[[OptionParser, Pipeline], None]


SUBCOMMANDS: Dict[str, Subcommand] = OrderedDict([
    ("build-corpus", Subcommand("Build vocabulary, idf and cross-covariance from a click log",
                                define_build_corpus, run_build_corpus)),
    ("mine-synonyms", Subcommand("Mine synonym pairs from the click graph",
                                 define_mine_synonyms, run_mine_synonyms)),
    ("mine-tags", Subcommand("Mine tag-term pairs from tagged documents",
                             define_mine_tags, run_mine_tags)),
    ("train", Subcommand("Train a latent matching model", define_train, run_train)),
    ("rank", Subcommand("Rank documents for queries", define_rank, run_rank)),
    ("evaluate", Subcommand("NDCG evaluation against judgments", define_evaluate, run_evaluate)),
    ("neighbors", Subcommand("List the latent-space neighbours of a term",
                             define_neighbors, run_neighbors)),
])


def usage() -> str:
    lines = [f"Usage: {PROG} <subcommand> [--option=value ...]", "", "Subcommands:"]
    for name, subcommand in SUBCOMMANDS.items():
        lines.append(f"  {name:<14} {subcommand.help}")
    lines.append("")
    lines.append(f"Run '{PROG} <subcommand> --help' for its options.")
    return '\n'.join(lines)


def define_common(cmd: SubcommandParser):
    cmd.define("threads", type=int, help="Worker count (default: all cores)", group="common")
    cmd.define("seed", type=int, help="Random seed", group="common")
    cmd.define("manifest", type=str, help="Write a JSON run manifest here", group="common")
    cmd.define("settings", type=str, help="Settings JSON (default: ./config.json if present)",
               group="common")
    cmd.define("debug", type=bool, default=False, help="Enable debug logging", group="common")
    cmd.define("log_dir", type=str, help="Directory for rotating log files", group="common")


def run_subcommand(argv: List[str]) -> int:
    """Run one subcommand, returns the process exit code"""
    if not argv or argv[0] in ("-h", "--help", "help"):
        print(usage(), file=sys.stdout if argv else sys.stderr)
        return EXIT_OK if argv else EXIT_USAGE

    name = argv[0]
    subcommand = SUBCOMMANDS.get(name)
    if subcommand is None:
        print(f"Unknown subcommand: {name}\n\n{usage()}", file=sys.stderr)
        return EXIT_USAGE

    cmd = SubcommandParser(name)
    define_common(cmd)
    subcommand.define(cmd)
    try:
        opts = cmd.parse(argv[1:])
        settings = load_settings(opts.settings)
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_OK
    except (OptionsError, ValueError, ConfigError) as e:
        print(f"{PROG} {name}: {e}", file=sys.stderr)
        return EXIT_USAGE

    log_settings = settings["logging"]
    debug = opts.debug or bool(log_settings["debug"])
    setup_logging(debug=debug, log_dir=opts.log_dir or log_settings["log_dir"] or None,
                  max_bytes=log_settings["max_bytes"], backup_count=log_settings["backup_count"])

    try:
        workers = resolve_workers(opts.threads)
        pipeline = Pipeline(name, opts.as_dict(), settings, workers)
    except ValueError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE

    logger.info("=" * 50)
    logger.info(f"latentmatch {__version__} - {name}")
    logger.info("=" * 50)
    logger.info(f"Workers: {workers}")
    logger.debug(f"Config hash: {pipeline.config_hash}")

    try:
        subcommand.run(opts, pipeline)
        if opts.manifest:
            pipeline.write_manifest(opts.manifest)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}", exc_info=debug)
        return EXIT_USAGE
    except DataError as e:
        logger.error(f"Data error: {e}", exc_info=debug)
        return EXIT_DATA
    except NumericalError as e:
        logger.error(f"Numerical error: {e}", exc_info=debug)
        return EXIT_NUMERICAL
    except LatentMatchError as e:
        logger.error(f"{name} failed: {e}", exc_info=debug)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{name} failed: {e}", exc_info=True)
        return EXIT_USAGE

    logger.info(f"{name} finished")
    return EXIT_OK


def main():
    """Main entry point"""
    sys.exit(run_subcommand(sys.argv[1:]))


if __name__ == "__main__":
    main()
