import pytest

from builders import ACCEPTANCE_LINES
from mfconsensus.core import ImageMeta


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def image():
    # 0.25 um per pixel: 30 px = 7.5 um
    return ImageMeta("img", 2000, 2000, 0.25)


@pytest.fixture
def images(image):
    return {image.image_id: image}
