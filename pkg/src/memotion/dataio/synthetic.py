"""Synthetic memes with learnable, modality-dependent labels.

Every sample has an image pattern ``p`` (colour + geometry) and a text
template ``t`` (a pool of template words mixed with shared filler words).
Labels are fixed functions of ``(p, t)``:

* humor      = p                          (image only)
* sarcasm    = t mod 4                    (text only)
* motivation = t mod 2                    (text only)
* offense    = 2 * (p // 2) + t mod 2     (needs both)
* sentiment  = 0 if p // 2 == 0 else 1 + t mod 2   (needs both)

``p // 2`` is the colour of the pattern and ``p mod 2`` its shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError
from ..tensor import make_rng
from .images import normalize_pixels
from .labels import LabelSet
from .sample import MemeSample
from .tokenizer import Vocabulary, build_vocab, tokenize

NUM_PATTERNS = 4
NUM_TEMPLATES = 6
SYNTH_STREAM = 7

_SYLLABLES = ["ka", "lo", "mi", "ru", "te", "zo", "bi", "ne", "fu", "sa", "po", "di", "gu", "ve", "ha", "yo"]
# pattern p = colour p // 2 (warm, cool) x shape p % 2 (stripes, disk)
_COLOURS = np.array([[0.95, 0.45, 0.15], [0.15, 0.4, 0.95]])


def _word(i: int) -> str:
    return _SYLLABLES[i % 16] + _SYLLABLES[(i // 16 + 3 * i) % 16] + _SYLLABLES[(7 * i + 5) % 16]


TEMPLATE_WORDS = [[_word(10 * t + k) for k in range(6)] for t in range(NUM_TEMPLATES)]
FILLER_WORDS = [_word(200 + k) for k in range(10)]
SLOT = 2


def fill_template(template: int, rng: np.random.Generator) -> str:
    """The template's words in fixed order with one random filler word in the slot."""
    words = list(TEMPLATE_WORDS[template])
    words.insert(SLOT, str(rng.choice(FILLER_WORDS)))
    return " ".join(words)


def labels_for(pattern: int, template: int) -> LabelSet:
    colour, parity = pattern // 2, template % 2
    return LabelSet(
        sentiment=0 if colour == 0 else 1 + parity,
        humor=pattern,
        sarcasm=template % 4,
        offense=2 * colour + parity,
        motivation=parity,
    )


def synthetic_vocab(size: int = 256) -> Vocabulary:
    corpus = [" ".join(words) for words in TEMPLATE_WORDS] + [" ".join(FILLER_WORDS)]
    return build_vocab(corpus, size)


def render_pattern(pattern: int, resolution: int, rng: np.random.Generator) -> np.ndarray:
    """``R×R×3`` image in [0, 1]: warm or cool stripes or disk, randomly placed, plus noise."""
    r = resolution
    yy, xx = np.mgrid[0:r, 0:r].astype(np.float64)
    if pattern % 2 == 0:
        period = r / 8
        shape = ((yy + rng.uniform(0, period)) % period) < period / 2
    else:
        cy, cx = rng.uniform(0.35 * r, 0.65 * r, size=2)
        shape = (yy - cy) ** 2 + (xx - cx) ** 2 < (0.3 * r) ** 2
    brightness = rng.uniform(0.8, 1.0)
    img = np.where(shape[..., None], _COLOURS[pattern // 2] * brightness, 0.1)
    img = img + rng.normal(0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def allocate(n: int, probs) -> np.ndarray:
    """Exact class counts for ``n`` draws (largest-remainder rounding)."""
    probs = np.asarray(probs, dtype=np.float64)
    probs = probs / probs.sum()
    raw = probs * n
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


@dataclass
class SyntheticDataset:
    samples: list[MemeSample]
    vocab: Vocabulary
    patterns: np.ndarray
    templates: np.ndarray
    texts: list[str]
    images_rgb: list[np.ndarray]


def generate_synthetic_dataset(
    n: int,
    seed: int,
    resolution: int = 64,
    max_seq_len: int = 64,
    vocab: Vocabulary | None = None,
    pattern_probs=None,
    template_probs=None,
) -> SyntheticDataset:
    """``n`` synthetic memes; pattern/template frequencies follow the given probabilities exactly."""
    if n < 10:
        raise InputError("the synthetic generator needs n >= 10")
    rng = make_rng(seed, SYNTH_STREAM)
    vocab = vocab or synthetic_vocab()
    pattern_probs = np.ones(NUM_PATTERNS) if pattern_probs is None else pattern_probs
    template_probs = np.ones(NUM_TEMPLATES) if template_probs is None else template_probs
    patterns = np.repeat(np.arange(NUM_PATTERNS), allocate(n, pattern_probs))
    templates = np.repeat(np.arange(NUM_TEMPLATES), allocate(n, template_probs))
    rng.shuffle(patterns)
    rng.shuffle(templates)

    samples, texts, images = [], [], []
    for i, (p, t) in enumerate(zip(patterns.tolist(), templates.tolist())):
        text = fill_template(t, rng)
        rgb = render_pattern(p, resolution, rng)
        samples.append(
            MemeSample(
                id=f"synth_{seed}_{i:05d}",
                image=normalize_pixels(rgb),
                text=tokenize(text, vocab, max_seq_len),
                labels=labels_for(p, t),
            )
        )
        texts.append(text)
        images.append(rgb)
    return SyntheticDataset(samples, vocab, patterns, templates, texts, images)
