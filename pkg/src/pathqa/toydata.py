"""Deterministic synthetic datasets bundled with the package.

Two generators:

* :func:`toy_movie_dataset` — a ~40-triple movie KG with 6 relations and 17
  questions, sized so the whole pipeline (enumeration, bag building,
  estimator and generator training, grounding, reasoning) runs end to end in
  seconds. Question entities each expose a single outgoing relation, so
  grounded evidence stays clean for the union reasoner.

* :func:`planted_path_benchmark` — a supervision-recovery benchmark: each
  question type has a planted informative relation pattern with opaque
  labels, every question additionally receives spurious answer-reaching
  chains (including a lexical-trap pattern whose labels overlap the question
  template, which fools embedding-similarity ranking) and non-answer decoy
  chains that give the bag classifier contrastive evidence.

Everything is a pure function of its seed.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .artifacts import atomic_write, derive_seed

SPORTS_MICROGRAPH = (
    "LeBron James\tparent\tBronny James",
    "Bronny James\tplay_for\tLos Angeles Lakers",
)


def sports_micrograph_lines() -> list[str]:
    """Two-triple chain used across docs and tests."""
    return list(SPORTS_MICROGRAPH)


# -- toy movie pipeline dataset ------------------------------------------------


def toy_movie_dataset() -> tuple[list[str], list[dict]]:
    """(triple lines, question rows) for the end-to-end toy pipeline."""
    triples: list[str] = []
    questions: list[dict] = []

    def add(h: str, r: str, t: str) -> None:
        triples.append(f"{h}\t{r}\t{t}")

    def ask(qid: str, text: str, entity: str, answers: list[str]) -> None:
        questions.append(
            {"id": qid, "question": text, "question_entities": [entity], "answers": answers}
        )

    directed = [
        ("Silver Horizon", ["Ava Chen", "Noah Reed"]),
        ("Crimson Tide Rising", ["Mira Kask"]),
        ("The Glass Orchard", ["Ava Chen"]),
    ]
    for i, (movie, directors) in enumerate(directed):
        for d in directors:
            add(movie, "directed_by", d)
        ask(f"dir{i}", f"Who directed the movie {movie}?", movie, directors)

    starring = [
        ("Winter Elegy", ["Tomas Berg", "Lena Voss"]),
        ("Paper Lanterns", ["Iris Malo", "Devan Kole"]),
        ("The Last Cartographer", ["Lena Voss", "Devan Kole"]),
    ]
    for i, (movie, actors) in enumerate(starring):
        for a in actors:
            add(movie, "starring", a)
        ask(f"act{i}", f"Which actors starred in the movie {movie}?", movie, actors)

    genres = [
        ("Midnight Ferry", "thriller"),
        ("The Orchard Wall", "drama"),
        ("Comet Season", "comedy"),
    ]
    for i, (movie, genre) in enumerate(genres):
        add(movie, "has_genre", genre)
        ask(f"gen{i}", f"What is the genre of the movie {movie}?", movie, [genre])

    filmed = [
        ("Harbor Lights", "Oslo"),
        ("The Quiet Dunes", "Marrakesh"),
        ("Iron Meadow", "Lyon"),
    ]
    for i, (movie, city) in enumerate(filmed):
        add(movie, "filmed_in", city)
        ask(f"loc{i}", f"In which city was the movie {movie} filmed?", movie, [city])

    languages = [
        ("Salt and Smoke", ["French"]),
        ("The Ninth Bell", ["Korean", "English"]),
        ("Gull Island", ["Norwegian"]),
    ]
    for i, (movie, langs) in enumerate(languages):
        for lang in langs:
            add(movie, "language_of", lang)
        ask(f"lang{i}", f"What language is spoken in the movie {movie}?", movie, langs)

    sequels = [
        ("Stormfront", "Stormfront II", "Pol Andersen"),
        ("Night Circuit", "Night Circuit Reloaded", "Mira Kask"),
    ]
    for i, (movie, sequel, director) in enumerate(sequels):
        add(movie, "sequel_of", sequel)
        add(sequel, "directed_by", director)
        ask(f"seq{i}", f"Who directed the sequel of the movie {movie}?", movie, [director])

    # background facts about movies no question asks about; they pad the store
    # without being reachable from any question entity
    background = [
        ("Ashen Valley", "directed_by", "Noah Reed"),
        ("Ashen Valley", "has_genre", "drama"),
        ("Ashen Valley", "filmed_in", "Oslo"),
        ("Ashen Valley", "starring", "Tomas Berg"),
        ("Blue Meridian", "directed_by", "Mira Kask"),
        ("Blue Meridian", "has_genre", "thriller"),
        ("Blue Meridian", "language_of", "French"),
        ("Blue Meridian", "starring", "Iris Malo"),
        ("Cold Harvest", "directed_by", "Pol Andersen"),
        ("Cold Harvest", "filmed_in", "Lyon"),
        ("Cold Harvest", "language_of", "English"),
        ("Cold Harvest", "starring", "Lena Voss"),
        ("Ember Coast", "directed_by", "Ava Chen"),
        ("Ember Coast", "has_genre", "comedy"),
        ("Ember Coast", "filmed_in", "Marrakesh"),
        ("Ember Coast", "starring", "Devan Kole"),
    ]
    for h, r, t in background:
        add(h, r, t)

    return triples, questions


# -- planted-path supervision benchmark ------------------------------------------

_TEMPLATES = (
    "what is the crimson attribute of the widget {e}",
    "which silver marker is linked to the gadget {e}",
    "what emerald tag belongs to the device {e}",
    "which golden badge connects to the module {e}",
    "what violet code is assigned to the unit {e}",
    "which amber label attaches to the part {e}",
)

_TRAP_PATTERNS = (
    ("crimson_attribute_of", "crimson_attribute_source"),
    ("silver_marker_link", "silver_marker_origin"),
    ("emerald_tag_of", "emerald_tag_holder"),
    ("golden_badge_connection", "golden_badge_port"),
    ("violet_code_assignment", "violet_code_registry"),
    ("amber_label_attachment", "amber_label_slot"),
)

_PLANTED_PATTERNS = tuple((f"px{k}qr", f"px{k}vt") for k in range(6))
_PURE_DECOYS = tuple((f"dk{j}mn", f"dk{j}wt") for j in range(4))


@dataclass
class PlantedBenchmark:
    """A generated supervision-recovery benchmark with its ground truth."""

    triple_lines: list[str]
    questions: list[dict]
    planted: dict[str, tuple[str, str]]
    train_ids: list[str]
    test_ids: list[str]


def planted_path_benchmark(
    n_questions: int = 200,
    n_train: int = 150,
    seed: int = 7,
    *,
    spurious_per_question: int = 3,
    trap_spurious_rate: float = 0.6,
) -> PlantedBenchmark:
    """Generate the benchmark described in the module docstring.

    Every question gets one planted chain, exactly ``spurious_per_question``
    spurious answer-reaching decoy chains, and three decoy chains ending in
    distractors. The type's lexical-trap pattern is always present, spurious
    with probability ``trap_spurious_rate`` (so it is unreliable evidence,
    which bag training can discover, while embedding similarity keeps
    ranking it first).
    """
    if not 0 < n_train < n_questions:
        raise ValueError("need 0 < n_train < n_questions")
    n_types = len(_TEMPLATES)
    triples: list[str] = []
    questions: list[dict] = []
    planted: dict[str, tuple[str, str]] = {}

    for i in range(n_questions):
        qtype = i % n_types
        rng = np.random.default_rng(derive_seed(seed, f"q{i}"))
        qid = f"pq{i:03d}"
        src = f"item{i:03d}"
        answer = f"q{i}ans"

        decoy_pool = [p for k, p in enumerate(_PLANTED_PATTERNS) if k != qtype]
        decoy_pool += [p for k, p in enumerate(_TRAP_PATTERNS) if k != qtype]
        decoy_pool += list(_PURE_DECOYS)
        picked = [decoy_pool[j] for j in rng.choice(len(decoy_pool), size=5, replace=False)]

        trap_is_spurious = bool(rng.random() < trap_spurious_rate)
        chains: list[tuple[tuple[str, str], bool]] = [(_PLANTED_PATTERNS[qtype], True)]
        chains.append((_TRAP_PATTERNS[qtype], trap_is_spurious))
        remaining_spurious = spurious_per_question - (1 if trap_is_spurious else 0)
        for j, pattern in enumerate(picked):
            chains.append((pattern, j < remaining_spurious))

        distractor_count = 0
        for j, (pattern, reaches_answer) in enumerate(chains):
            mid = f"q{i}m{j}"
            if reaches_answer:
                end = answer
            else:
                end = f"q{i}x{distractor_count}"
                distractor_count += 1
            triples.append(f"{src}\t{pattern[0]}\t{mid}")
            triples.append(f"{mid}\t{pattern[1]}\t{end}")

        questions.append(
            {
                "id": qid,
                "question": _TEMPLATES[qtype].format(e=src),
                "question_entities": [src],
                "answers": [answer],
            }
        )
        planted[qid] = _PLANTED_PATTERNS[qtype]

    ids = [q["id"] for q in questions]
    return PlantedBenchmark(
        triple_lines=triples,
        questions=questions,
        planted=planted,
        train_ids=ids[:n_train],
        test_ids=ids[n_train:n_questions],
    )


# -- file materialization ----------------------------------------------------------


def write_dataset(out_dir, triple_lines: list[str], questions: list[dict]) -> tuple[Path, Path]:
    """Write kg.tsv and questions.jsonl under ``out_dir``."""
    out = Path(out_dir)
    kg_path = out / "kg.tsv"
    questions_path = out / "questions.jsonl"
    with atomic_write(kg_path) as fh:
        for line in triple_lines:
            fh.write(line + "\n")
    with atomic_write(questions_path) as fh:
        for row in questions:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return kg_path, questions_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Materialize the bundled toy datasets.")
    parser.add_argument("out_dir", help="directory to write kg.tsv and questions.jsonl into")
    parser.add_argument(
        "--benchmark", action="store_true",
        help="write the planted-path benchmark instead of the movie dataset",
    )
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    if args.benchmark:
        bench = planted_path_benchmark(seed=args.seed)
        kg_path, q_path = write_dataset(args.out_dir, bench.triple_lines, bench.questions)
        ref_path = Path(args.out_dir) / "reference_paths.jsonl"
        with atomic_write(ref_path) as fh:
            for qid, pattern in bench.planted.items():
                fh.write(json.dumps({"id": qid, "paths": [list(pattern)]}) + "\n")
        print(f"wrote {kg_path}, {q_path}, {ref_path}")
    else:
        kg_path, q_path = write_dataset(args.out_dir, *toy_movie_dataset())
        print(f"wrote {kg_path}, {q_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
