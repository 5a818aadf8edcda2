"""Synthetic corpora shared by module and acceptance tests."""

from rsvlm import dual_encoder as de
from rsvlm.model import ModelConfig, encode_text
from rsvlm.numerics import Rng
from rsvlm.training import caption_sample, instruction_sample

RETRIEVER_DIM = 12
RETRIEVER_VOCAB = 256


def contrastive_corpus(seed: int, n: int = 32, dim: int = RETRIEVER_DIM,
                       vocab: int = RETRIEVER_VOCAB):
    """Pairs whose text is a deterministic sign-pattern readout of the image
    features, with distinct sign signatures guaranteed."""
    rng = Rng(seed)
    pairs, seen = [], set()
    while len(pairs) < n:
        x = rng.normal((dim,))
        sig = tuple(bool(v > 0) for v in x)
        if sig in seen:
            x = x.copy()
            x[len(pairs) % dim] *= -1.0
            sig = tuple(bool(v > 0) for v in x)
            if sig in seen:
                continue
        seen.add(sig)
        words = " ".join(f"pos{j}" if x[j] > 0 else f"neg{j}" for j in range(dim))
        pairs.append(de.ContrastivePair(x, de.tokenize_text(words, vocab)))
    return pairs


def caption_corpus(seed: int, cfg: ModelConfig, n: int = 64):
    """Alignment pairs over a tiny caption alphabet tied to the sample index."""
    rng = Rng(seed)
    words = ["aaaa", "bbbb", "abab", "baba"]
    samples = []
    for i in range(n):
        patches = rng.normal((4, cfg.patch_dim))
        caption = words[i % 4] + " " + words[(i // 4) % 4]
        samples.append(caption_sample(patches, caption))
    return samples


def instruction_corpus(seed: int, cfg: ModelConfig, n: int = 16):
    rng = Rng(seed)
    nouns = ["red barn", "blue lake", "sand dune", "green park"]
    semantics = ["an aerial scene", "a rural area", "an urban grid", "a coastal strip"]
    samples = []
    for i in range(n):
        patches = rng.normal((4, cfg.patch_dim))
        query = f"what is at site {i}?"
        response = f"{nouns[i % 4]} {i}"
        samples.append(instruction_sample(
            patches, query, response,
            semantic_ids=encode_text(semantics[i % 4]),
        ))
    return samples
