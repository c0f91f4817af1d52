"""Deterministic toy knowledge graph: guild members, guild halls and crafts.

Eight hub entities (five guild halls, three crafts) and 42 members.  Every
relation follows a rule over a member's guild and craft, so held-out triples
are inferable from the train graph and from the entity descriptions.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import KnowledgeGraph, write_dataset_dir

GUILDS = ("amber", "cobalt", "crimson", "jade", "silver")
CRAFTS = ("smith", "weaver", "scribe")
RELATIONS = (
    ("located_in", "located in"),
    ("practices", "practices craft"),
    ("colleague_of", "colleague of"),
    ("apprentice_of", "apprentice of"),
    ("trades_with", "trades with"),
    ("rival_of", "rival of"),
)
SYLLABLES = ("ka", "lo", "mi", "ren", "to", "vi", "sa", "du", "ne", "por", "li", "zu", "ba", "fen", "go")
MEMBERS = 42
DEFAULT_SEED = 7
SPLIT_SIZES = {"valid": 30, "test": 30}


def _member_names(rng: np.random.Generator, count: int) -> list[str]:
    names: set[str] = set()
    out = []
    while len(out) < count:
        first = "".join(rng.choice(SYLLABLES, size=2))
        last = "".join(rng.choice(SYLLABLES, size=2))
        name = f"{first} {last}"
        if name not in names:
            names.add(name)
            out.append(name)
    return out


def make_toy_graph(seed: int = DEFAULT_SEED) -> KnowledgeGraph:
    rng = np.random.default_rng(seed)
    ent_ids, names, descs = [], [], []
    for g in GUILDS:
        ent_ids.append(f"hall_{g}")
        names.append(f"{g} guild hall")
        descs.append(f"the meeting hall of the {g} guild")
    for c in CRAFTS:
        ent_ids.append(f"craft_{c}")
        names.append(f"{c} craft")
        descs.append(f"the craft practiced by every {c}")
    hubs = len(ent_ids)
    guild_of, craft_of = [], []
    for k, name in enumerate(_member_names(rng, MEMBERS)):
        g = k % len(GUILDS)
        c = int(rng.integers(len(CRAFTS)))
        guild_of.append(g)
        craft_of.append(c)
        ent_ids.append(f"m{k:02d}")
        names.append(name)
        descs.append(f"a {CRAFTS[c]} of the {GUILDS[g]} guild")
    guild_of = np.asarray(guild_of)
    craft_of = np.asarray(craft_of)
    members = np.arange(MEMBERS)

    triples: set[tuple[int, int, int]] = set()
    for m in members:
        triples.add((hubs + m, 0, int(guild_of[m])))
        triples.add((hubs + m, 1, len(GUILDS) + int(craft_of[m])))

    def link(rel: int, count: int, allowed) -> None:
        added = 0
        while added < count:
            a, b = rng.choice(MEMBERS, size=2, replace=False)
            if allowed(a, b) and (hubs + a, rel, hubs + b) not in triples:
                triples.add((hubs + int(a), rel, hubs + int(b)))
                added += 1

    link(2, 80, lambda a, b: guild_of[a] == guild_of[b])
    link(3, 60, lambda a, b: craft_of[a] == craft_of[b])
    link(4, 70, lambda a, b: guild_of[a] == guild_of[b] or craft_of[a] == craft_of[b])
    link(5, 70, lambda a, b: guild_of[b] == (guild_of[a] + 1) % len(GUILDS))

    rows = np.asarray(sorted(triples), dtype=np.int64)
    rows = rows[rng.permutation(len(rows))]
    held_out = sum(SPLIT_SIZES.values())
    # held-out triples must keep both endpoints present in train
    train_mask = np.ones(len(rows), dtype=bool)
    degree = np.bincount(np.concatenate([rows[:, 0], rows[:, 2]]), minlength=len(ent_ids))
    chosen = []
    for i, (h, _, t) in enumerate(rows):
        if len(chosen) == held_out:
            break
        if degree[h] > 2 and degree[t] > 2:
            chosen.append(i)
            degree[h] -= 1
            degree[t] -= 1
            train_mask[i] = False
    chosen = np.asarray(chosen)
    valid = rows[chosen[:SPLIT_SIZES["valid"]]]
    test = rows[chosen[SPLIT_SIZES["valid"]:]]
    train = rows[train_mask]
    return KnowledgeGraph(
        tuple(ent_ids), tuple(names), tuple(descs),
        tuple(r for r, _ in RELATIONS), tuple(n for _, n in RELATIONS),
        train, valid, test,
    )


def write_toy_dataset(root, seed: int = DEFAULT_SEED) -> dict:
    """Write the toy TSV dump plus ``manifest.json`` to ``root``."""
    g = make_toy_graph(seed)
    extra = {
        "generator": "toy",
        "seed": seed,
        "neighbor_pairs": 2 * int(len(g.train)) + g.num_entities,
        # generous bounds on mean-pooled text embeddings from a layer-normed encoder
        "text_embedding_norm_range": [1e-3, 1e3],
    }
    return write_dataset_dir(g, Path(root), extra)


def bundled_toy_dir() -> Path:
    return Path(__file__).parent / "fixtures" / "toy"
