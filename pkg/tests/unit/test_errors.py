import pytest

from vexir import errors
from vexir.errors import ExitCode


@pytest.mark.parametrize("error, code", (
    (errors.ProbeError, ExitCode.CONFIG),
    (errors.SubspaceError, ExitCode.CONFIG),
    (errors.DimensionError, ExitCode.DATA),
    (errors.FormatError, ExitCode.DATA),
    (errors.ShortfallError, ExitCode.DATA),
    (errors.ConsistencyError, ExitCode.INTERNAL),
    (errors.GraphConnectivityError, ExitCode.INTERNAL),
    (errors.VexirError, ExitCode.INTERNAL),
    ),
    ids=lambda value: getattr(value, "__name__", str(value))
)
def test_families_map_to_exit_codes(error, code):
    assert error.exit_code == code


@pytest.mark.parametrize("error, builtin", (
    (errors.DimensionError, ValueError),
    (errors.CodeError, IndexError),
    (errors.EmptyLayerError, LookupError),
    (errors.ProbeError, ValueError),
    ),
    ids=["dimension", "code", "empty-layer", "list-count"]
)
def test_builtin_catch_still_works(error, builtin):
    with pytest.raises(builtin):
        raise error("boom")


def test_shortfall_keeps_partial():
    exc = errors.ShortfallError("only 2", [4, 5])
    assert exc.partial == [4, 5]
    assert str(exc) == "only 2"


def test_exit_code_values_are_fixed():
    assert [int(code) for code in ExitCode] == [0, 2, 3, 4]
