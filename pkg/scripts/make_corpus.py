"""Generate the bundled text corpus under data/corpus/.

The text is produced by a small seeded grammar (stories about travellers,
towns and weather, with dialogue), so it is public domain by construction
and byte-for-byte reproducible:

    python scripts/make_corpus.py            # writes data/corpus/{train,calib,eval}
"""
from __future__ import annotations

import argparse
from pathlib import Path

from layerquant.tensor import Rng

NAMES = ["Anna", "Tomas", "Elise", "Martin", "Clara", "Hugo", "Ida", "Pieter", "Rosa", "Walter",
         "Greta", "Oskar", "Lena", "Felix", "Maren", "Jonas", "Vera", "Emil", "Sofie", "Arne"]
PLACES = ["the old mill", "the harbour", "the market square", "the river bank", "the chapel",
          "the north road", "the orchard", "the inn", "the bridge", "the forest edge", "the lighthouse",
          "the schoolhouse", "the quarry", "the station", "the garden wall", "the long field"]
TOWNS = ["Aldmere", "Brackwater", "Carrow", "Dunhollow", "Eastfold", "Fennick", "Greyhaven", "Holloway"]
ADJ = ["quiet", "cold", "bright", "narrow", "heavy", "gentle", "grey", "broad", "small", "ancient",
       "warm", "empty", "crowded", "distant", "steep", "wet", "silver", "pale", "dark", "green"]
NOUNS = ["letter", "lantern", "basket", "coat", "map", "key", "boat", "horse", "bell", "book",
         "window", "door", "cart", "stone", "cup", "candle", "rope", "ladder", "table", "box"]
VERBS_T = ["carried", "found", "opened", "mended", "painted", "lifted", "counted", "watched",
           "followed", "cleaned", "sold", "bought", "hid", "brought", "kept", "lost"]
VERBS_I = ["waited", "walked", "listened", "laughed", "slept", "worked", "sang", "rested",
           "wandered", "hesitated", "smiled", "returned"]
ADVERBS = ["slowly", "carefully", "quietly", "at once", "without a word", "again", "for a while",
           "in silence", "with some care", "before long"]
TIMES = ["In the morning", "At dusk", "Later that day", "On the third day", "Before dawn",
         "By noon", "That evening", "Some weeks later", "When the rain stopped", "After supper"]
WEATHER = ["the wind rose from the sea", "a thin rain fell over the roofs", "the sky cleared to the west",
           "snow lay in the ditches", "the fog lifted from the water", "the sun was low and red",
           "clouds gathered over the hills", "the air was still and close"]
FEELINGS = ["tired", "glad", "uneasy", "hopeful", "curious", "restless", "content", "afraid"]
SAYINGS = ["We should leave before the light goes", "I have seen this {noun} before",
           "Nobody in {town} will believe it", "Bring the {noun} to {place}",
           "It is only a {adj} {noun}", "Tell me what you found at {place}",
           "The road to {town} is longer than it looks", "Wait here until I return",
           "Did you hear the bell from {place}", "I will mend the {noun} tomorrow"]


class Grammar:
    def __init__(self, seed: int):
        self.rng = Rng(seed)

    def pick(self, xs):
        return xs[int(self.rng.next_uniform() * len(xs))]

    def chance(self, p: float) -> bool:
        return self.rng.next_uniform() < p

    def np(self) -> str:
        if self.chance(0.6):
            return f"the {self.pick(ADJ)} {self.pick(NOUNS)}"
        return f"a {self.pick(NOUNS)}"

    def fill(self, s: str, cast) -> str:
        return s.format(noun=self.pick(NOUNS), town=self.pick(TOWNS), place=self.pick(PLACES),
                        adj=self.pick(ADJ), name=self.pick(cast))

    def sentence(self, cast) -> str:
        who = self.pick(cast)
        r = self.rng.next_uniform()
        if r < 0.25:
            s = f"{who} {self.pick(VERBS_T)} {self.np()} near {self.pick(PLACES)}"
        elif r < 0.4:
            s = f"{self.pick(TIMES)}, {self.pick(WEATHER)}, and {who} {self.pick(VERBS_I)} {self.pick(ADVERBS)}"
        elif r < 0.55:
            other = self.pick(cast)
            s = f"{who} and {other} {self.pick(VERBS_I)} by {self.pick(PLACES)}"
        elif r < 0.7:
            said = self.fill(self.pick(SAYINGS), cast)
            end = "?" if said.startswith(("Did", "Tell")) and self.chance(0.5) else ","
            return f'"{said}{end}" said {who}.'
        elif r < 0.82:
            s = f"{who} felt {self.pick(FEELINGS)}, for {self.pick(WEATHER)}"
        elif r < 0.92:
            s = f"The {self.pick(NOUNS)} was {self.pick(ADJ)} and the {self.pick(NOUNS)} was {self.pick(ADJ)}"
        else:
            s = f"{who} {self.pick(VERBS_T)} {self.np()} and {self.pick(VERBS_I)} {self.pick(ADVERBS)}"
        s = s[0].upper() + s[1:]
        return s + "."

    def paragraph(self, cast) -> str:
        n = 3 + int(self.rng.next_uniform() * 5)
        return " ".join(self.sentence(cast) for _ in range(n))

    def document(self, n_bytes: int, title: str) -> str:
        cast = [self.pick(NAMES) for _ in range(3)]
        out = [title, ""]
        size = len(title) + 1
        chapter = 1
        while size < n_bytes:
            if chapter == 1 or self.chance(0.08):
                head = f"CHAPTER {chapter}. {self.pick(TOWNS).upper()}"
                out += [head, ""]
                size += len(head) + 2
                chapter += 1
            p = self.paragraph(cast)
            out += [p, ""]
            size += len(p) + 2
        return "\n".join(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "corpus"))
    ap.add_argument("--seed", type=int, default=19)
    args = ap.parse_args()
    root = Path(args.out)
    layout = {"train": (8, 100_000), "calib": (50, 2_000), "eval": (4, 25_000)}
    for split, (n_docs, size) in layout.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for j in range(n_docs):
            g = Grammar(args.seed * 1_000_003 + j + {"train": 0, "calib": 1000, "eval": 2000}[split])
            text = g.document(size, f"The {split.title()} Book, Part {j + 1}")
            (d / f"{split}_{j:03d}.txt").write_text(text + "\n", encoding="utf-8")
    print(f"wrote corpus to {root}")


if __name__ == "__main__":
    main()
