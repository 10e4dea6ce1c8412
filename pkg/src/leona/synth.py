"""Synthetic desk-scale corpora.

Two generators, both deterministic given a seed:

  toy_corpus          50 utterances over two domains and four slot types;
                      small enough to overfit in minutes on one core.
  zero_shot_corpora   a train domain and a disjoint test domain whose slot
                      values carry the head word of their slot description
                      ("Amber Eatery", "Velvet Museum"), so typing a span
                      means matching lexical cues against the description.
                      Test-domain slot types and value words never occur
                      in training.

The bundled JSONL files under data/ are written by write_bundled_data().
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .corpus import Dataset, SlotType, Utterance, save_corpus_file, save_slot_file

# slot values end with a capitalized form of their description's head word
# ("Amber Eatery", "Velvet Museum"), the way real venue names carry their
# kind; typing a span means matching that lexical cue against the
# description, which is what transfers to unseen slot types. The zero-shot
# corpora use the same sentence templates for every slot type, so template
# identity carries no type information at all.
VALUE_HEADS = {
    "eatery_name": "Eatery",
    "town_name": "Town",
    "dish_name": "Dish",
    "album_name": "Album",
    "artist_name": "Artist",
    "street_name": "Street",
    "garden_name": "Garden",
    "cinema_name": "Cinema",
    "bakery_name": "Bakery",
    "library_name": "Library",
    "bridge_name": "Bridge",
    "market_name": "Market",
    "school_name": "School",
    "river_name": "River",
    "museum_name": "Museum",
    "harbor_name": "Harbor",
    "castle_name": "Castle",
}
TRAIN_VALUE_WORDS = (
    "Amber", "Birch", "Cedar", "Dahlia", "Ember", "Fennel", "Garnet",
    "Hazel", "Indigo", "Juniper", "Lumen", "Mosaic", "Nectar", "Opal",
    "Quartz", "Rowan", "Saffron", "Thistle",
)
TEST_VALUE_WORDS = (
    "Umber", "Velvet", "Wisteria", "Yarrow", "Zephyr", "Arbor", "Basalt",
    "Cobalt", "Drift", "Fjord", "Gale", "Harlow", "Jasper", "Kestrel",
)

# used by the overfit corpus only; typed by domain vocabulary
DINING_TEMPLATES = (
    "please book a table at {eatery_name} for us",
    "reserve {eatery_name} for tonight",
    "we will meet in {town_name} near the station",
    "could you find {town_name} on the map",
    "i would like the {dish_name} please",
    "order the {dish_name} for me now",
    "find a quiet table at {eatery_name} please",
    "is the {dish_name} popular there",
    "book {eatery_name} now",
    "the {town_name} is lovely tonight",
)
MUSIC_TEMPLATES = (
    "please play the {album_name} for me",
    "play the {artist_name} now",
    "queue the {album_name} tonight",
    "play something by the {artist_name} please",
    "add the {album_name} to the list",
)

# shared by every slot type in the zero-shot corpora
GENERIC_TEMPLATES = (
    "please find the {slot} for me",
    "i am looking for the {slot} today",
    "take me to the {slot} now",
    "where is the {slot} please",
    "show me the {slot} on the map",
    "can we try the {slot} tonight",
)

ZERO_SHOT_TRAIN_SLOTS = (
    "eatery_name", "town_name", "dish_name", "street_name", "garden_name",
    "cinema_name", "bakery_name", "library_name", "bridge_name",
    "market_name", "school_name", "river_name",
)
ZERO_SHOT_TEST_SLOTS = ("museum_name", "harbor_name", "castle_name", "town_name")

DOMAIN_SLOTS = {
    "dining": ("eatery_name", "town_name", "dish_name"),
    "music": ("album_name", "artist_name"),
    "places": ZERO_SHOT_TRAIN_SLOTS,
    "travel": ZERO_SHOT_TEST_SLOTS,
}


def _value(rng: np.random.Generator, pool: Sequence[str], slot: str) -> List[str]:
    k = 2 if rng.random() < 0.35 else 1
    picked = rng.choice(len(pool), size=k, replace=False)
    return [pool[int(i)] for i in picked] + [VALUE_HEADS[slot]]


def _fill(
    template: str, rng: np.random.Generator, pool: Sequence[str]
) -> Tuple[List[str], List[str]]:
    tokens: List[str] = []
    labels: List[str] = []
    for piece in template.split():
        if piece.startswith("{"):
            slot = piece[1:-1]
            value = _value(rng, pool, slot)
            tokens.extend(value)
            labels.append(f"B-{slot}")
            labels.extend([f"I-{slot}"] * (len(value) - 1))
        else:
            tokens.append(piece)
            labels.append("O")
    return tokens, labels


def _generate(
    domain: str,
    intent: str,
    templates: Sequence[str],
    count: int,
    pool: Sequence[str],
    rng: np.random.Generator,
    id_prefix: str,
) -> List[Utterance]:
    utterances = []
    for i in range(count):
        template = templates[int(rng.integers(len(templates)))]
        tokens, labels = _fill(template, rng, pool)
        utterances.append(
            Utterance(
                id=f"{id_prefix}-{i:03d}",
                domain=domain,
                intent=intent,
                tokens=tuple(tokens),
                labels=tuple(labels),
            )
        )
    return utterances


def _slot_types(domains: Sequence[str]) -> List[SlotType]:
    by_name: Dict[str, set] = {}
    for domain in domains:
        for name in DOMAIN_SLOTS[domain]:
            by_name.setdefault(name, set()).add(domain)
    return [
        SlotType(
            name=name,
            description_tokens=tuple(name.replace("_", " ").split()),
            domains=frozenset(doms),
        )
        for name, doms in sorted(by_name.items())
    ]


def toy_corpus(count: int = 50, seed: int = 7) -> Dataset:
    """Two seen domains, four slot types; the overfit sanity corpus."""
    rng = np.random.default_rng(seed)
    half = count // 2
    dining = tuple(t for t in DINING_TEMPLATES if "dish_name" not in t)
    utterances = _generate(
        "dining", "book_table", dining, half, TRAIN_VALUE_WORDS, rng, "toy-din"
    )
    utterances += _generate(
        "music", "play_track", MUSIC_TEMPLATES, count - half, TRAIN_VALUE_WORDS, rng, "toy-mus"
    )
    slots = [st for st in _slot_types(["dining", "music"]) if st.name != "dish_name"]
    return Dataset(utterances, slots)


def zero_shot_corpora(
    per_train_slot: int = 4, per_test_slot: int = 6, seed: int = 11
) -> Dataset:
    """A seen domain with twelve slot types plus an unseen domain whose
    museum/harbor/castle types and value words never occur in training;
    town_name appears in both, exercising the seen-slot path. All types use
    the same sentence templates."""
    rng = np.random.default_rng(seed)
    utterances = []
    counter = 0
    for slot in ZERO_SHOT_TRAIN_SLOTS:
        templates = tuple(t.replace("{slot}", "{" + slot + "}") for t in GENERIC_TEMPLATES)
        utterances += _generate(
            "places", "find_place", templates, per_train_slot, TRAIN_VALUE_WORDS,
            rng, f"zs-pl{counter:02d}",
        )
        counter += 1
    for slot in ZERO_SHOT_TEST_SLOTS:
        templates = tuple(t.replace("{slot}", "{" + slot + "}") for t in GENERIC_TEMPLATES)
        pool = TRAIN_VALUE_WORDS if slot == "town_name" else TEST_VALUE_WORDS
        utterances += _generate(
            "travel", "plan_trip", templates, per_test_slot, pool, rng, f"zs-tr{counter:02d}",
        )
        counter += 1
    return Dataset(utterances, _slot_types(["places", "travel"]))


def data_dir() -> Path:
    return Path(__file__).parent / "data"


def write_bundled_data(target: Path = None) -> None:
    target = target or data_dir()
    target.mkdir(parents=True, exist_ok=True)
    toy = toy_corpus()
    save_corpus_file(target / "toy_corpus.jsonl", toy.utterances)
    save_slot_file(target / "toy_slots.jsonl", toy.slot_types)
    zs = zero_shot_corpora()
    save_corpus_file(target / "zeroshot_corpus.jsonl", zs.utterances)
    save_slot_file(target / "zeroshot_slots.jsonl", zs.slot_types)


def load_bundled(name: str) -> Dataset:
    """name: "toy" or "zeroshot"; loads the shipped corpus files."""
    from .corpus import load_dataset

    return load_dataset(data_dir() / f"{name}_corpus.jsonl", data_dir() / f"{name}_slots.jsonl")
