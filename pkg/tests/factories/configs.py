from factory import Factory, Faker, SubFactory

from vexir.config import DataConfig, DataMode, IndexConfig, IndexKind, IvfConfig, RunConfig
from .dict_generator import generate_dict_factory


class IvfSectionFactory(Factory):

    class Meta:
        model = IvfConfig

    lists = 8
    probes = 2
    iters = 5


class IndexSectionFactory(Factory):

    class Meta:
        model = IndexConfig

    kind = IndexKind.flat
    mip = False
    ivf = SubFactory(IvfSectionFactory)


class DataSectionFactory(Factory):

    class Meta:
        model = DataConfig

    mode = DataMode.dense
    docs = "docs.vxe"
    queries = "queries.vxe"


class RunConfigFactory(Factory):

    class Meta:
        model = RunConfig

    seed = Faker("pyint", min_value=0, max_value=10_000)
    k = 10
    workers = 1
    index = SubFactory(IndexSectionFactory)
    data = SubFactory(DataSectionFactory)


RunConfigDictFactory = generate_dict_factory(RunConfigFactory)
