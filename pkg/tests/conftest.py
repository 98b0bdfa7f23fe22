import os

import pytest

from skiff.plan import SiteConfig, StepContext
from skiff.hooks import HookRegistry
from skiff.storage import MemoryBackend, OpCounter
from skiff.imagestore import LocalStore, SharedStore, import_image, migrate


DATA_DIR = os.path.join(os.path.dirname(__file__), 'data')


def data_path(*parts):
    return os.path.join(DATA_DIR, *parts)


def read_data(*parts):
    with open(data_path(*parts), 'r', encoding='utf-8') as f:
        return f.read()


@pytest.fixture
def host_env():
    return {'USER': 'alice', 'HOME': '/users/alice'}


@pytest.fixture
def training_edf():
    return read_data('training.toml')


@pytest.fixture
def site():
    return SiteConfig(hooks_config=data_path('hooks.json'), cdi_dir=data_path('cdi'))


@pytest.fixture
def hooks():
    return HookRegistry.load(data_path('hooks.json'), data_path('cdi'))


@pytest.fixture
def ctx():
    return StepContext(job_id=1234, step_id=0, user='alice', uid=1000, gid=1000)


@pytest.fixture
def shared():
    return SharedStore(MemoryBackend(OpCounter(record=True), name='shared'))


@pytest.fixture
def publish(shared):
    """Import then migrate a LayeredImage into the `shared` fixture store"""
    def _publish(image):
        local = LocalStore(MemoryBackend(name='local'))
        import_image(image, local)
        return migrate(image.reference, local, shared)
    return _publish
