from .configs import RunConfigDictFactory, RunConfigFactory
from .vectors import EmbeddingSetFactory, MultiEmbeddingFactory, SparseVectorFactory, rng
