import numpy as np
from factory import Factory, Faker, LazyAttribute, Sequence
from factory.fuzzy import FuzzyInteger

from vexir.core import EmbeddingSet, MultiEmbedding, SparseVector


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))


class EmbeddingSetFactory(Factory):
    """Standard normal vectors with ids 0..n-1"""

    class Meta:
        model = EmbeddingSet

    class Params:
        n = 50
        dim = 8
        seed = FuzzyInteger(0, 2**31)

    ids = LazyAttribute(lambda o: np.arange(o.n))
    matrix = LazyAttribute(lambda o: rng(o.seed).standard_normal((o.n, o.dim)))


class MultiEmbeddingFactory(Factory):
    """Token matrix whose row 0 carries the classification token id 0"""

    class Meta:
        model = MultiEmbedding

    class Params:
        tokens = 6
        dim = 8
        vocab = 20
        seed = Faker("pyint", min_value=0, max_value=2**31)

    id = Sequence(lambda n: n)
    matrix = LazyAttribute(lambda o: rng(o.seed).standard_normal((o.tokens, o.dim)))
    token_ids = LazyAttribute(
        lambda o: [0] + rng(o.seed + 1).integers(1, o.vocab, o.tokens - 1).tolist()
    )


class SparseVectorFactory(Factory):
    """Distinct terms below ``vocab`` with exponential weights"""

    class Meta:
        model = SparseVector

    class Params:
        terms = 10
        vocab = 100
        seed = FuzzyInteger(0, 2**31)

    doc_id = Sequence(lambda n: n)
    entries = LazyAttribute(
        lambda o: dict(zip(
            rng(o.seed).choice(o.vocab, o.terms, replace=False).tolist(),
            (rng(o.seed + 1).exponential(1.0, o.terms) + 0.01).tolist(),
        ))
    )
