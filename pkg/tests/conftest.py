import pytest

from eenas.arch import SpaceConfig, builtin_backbone
from eenas.hwcost import AcceleratorSpec


@pytest.fixture(scope="session")
def mobilenet():
    return builtin_backbone("mobilenetv2_cifar")


@pytest.fixture(scope="session")
def smallconv():
    return builtin_backbone("smallconv")


@pytest.fixture(scope="session")
def mobile_space(mobilenet):
    return SpaceConfig(backbone=mobilenet)


@pytest.fixture(scope="session")
def small_space(smallconv):
    return SpaceConfig(backbone=smallconv)


@pytest.fixture(scope="session")
def accel():
    return AcceleratorSpec()
