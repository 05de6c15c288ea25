import numpy as np
import pytest

from tetherlm import corpus
from tetherlm.lm import Alphabet, Distribution, NgramModel, train_ngram


def random_distribution(rng: np.random.Generator, size: int, floor: float = 1e-6) -> Distribution:
    p = rng.dirichlet(np.ones(size)) + floor
    return Distribution.from_probs(p)


def random_pair(rng: np.random.Generator, size: int):
    return random_distribution(rng, size), random_distribution(rng, size)


def tiny_model(rng: np.random.Generator, alphabet: Alphabet, order: int = 1) -> NgramModel:
    """Random-count n-gram model over a small alphabet."""
    docs = []
    for _ in range(6):
        n = int(rng.integers(4, 20))
        picks = rng.integers(0, alphabet.size - 1, size=n)  # keep EOS out of bodies
        docs.append([alphabet.symbols[i] for i in picks] + [alphabet.eos])
    return train_ngram(docs, order, float(rng.uniform(0.05, 0.6)), alphabet)


def small_alphabet(n: int) -> Alphabet:
    return Alphabet.from_symbols([chr(ord("a") + i) for i in range(n - 1)])


@pytest.fixture(scope="session")
def memo_fixture():
    """The memorization setup shared by the trend, diagnostics, and
    ablation acceptance criteria: risky char 5-gram on open + 20
    protected passages repeated x50, a weaker safe anchor on the open
    corpus only, and an order-5 utility model on held-out text.
    """
    c = corpus.synth_corpora(100)
    open_docs, heldout, passages = c["open"], c["heldout"], c["passages"]
    alphabet = corpus.build_alphabet(
        open_docs + heldout + c["heldout_open"] + passages, corpus.CHAR
    )
    risky = train_ngram(
        corpus.corpus_sequences(open_docs + passages * 50, corpus.CHAR), 5, 0.01, alphabet
    )
    safe = train_ngram(corpus.corpus_sequences(open_docs, corpus.CHAR), 5, 0.01, alphabet)
    utility = train_ngram(corpus.corpus_sequences(heldout, corpus.CHAR), 5, 0.01, alphabet)
    return {
        "open": open_docs,
        "heldout": heldout,
        "heldout_open": c["heldout_open"],
        "passages": passages,
        "alphabet": alphabet,
        "risky": risky,
        "safe": safe,
        "utility": utility,
    }


@pytest.fixture(scope="session")
def memo_run(memo_fixture, tmp_path_factory):
    """Corpora written to disk plus the spec pointing at them."""
    from tetherlm.harness import ExperimentSpec

    root = tmp_path_factory.mktemp("memo-run")
    corpus.write_documents(memo_fixture["passages"], root / "protected.txt")
    corpus.write_documents(memo_fixture["open"], root / "open.txt")
    corpus.write_documents(memo_fixture["heldout"], root / "heldout.txt")
    corpus.write_documents(memo_fixture["heldout_open"], root / "heldout_open.txt")
    spec = ExperimentSpec(
        protected_path=str(root / "protected.txt"),
        open_path=str(root / "open.txt"),
        heldout_path=str(root / "heldout.txt"),
        prompts_path=str(root / "heldout_open.txt"),
        out_dir=str(root / "out"),
        methods=("safe", "risky", "anchored", "no_opt", "cold_start"),
        k_grid=(0.1, 0.5, 1.0, 2.0, 5.0, 20.0),
        seeds=(0, 1, 2),
        order=5,
        smoothing=0.01,
        t_max=200,
        prompt_len=100,
        ref_len=200,
        prompts_per_passage=3,
        write_traces=False,
    )
    return {"root": root, "spec": spec}
