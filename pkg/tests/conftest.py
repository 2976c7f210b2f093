import pytest

# a few-second configuration shared by the checkpoint, CLI and training tests
SMALL_CONFIG = """\
[model]
image_size = 8
patch_size = 4
visual_depth = 2
visual_width = 16
visual_heads = 2
text_depth = 2
text_width = 16
text_heads = 2
cross_depth = 2
cross_width = 16
cross_heads = 2
ffn_expansion = 2
[data]
n_pairs = 12
n_heldout = 4
vocab_size = 60
[train]
steps = 6
batch_size = 4
lr = 1e-3
dtype = float64
"""


@pytest.fixture
def small_config_text():
    return SMALL_CONFIG


_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; lines print live and again in the summary."""
    lines = request.config.stash.setdefault(_LINES, [])
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def report(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
