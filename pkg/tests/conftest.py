import pytest

import utils.settings as settings_mod


@pytest.fixture(autouse=True)
def set_debug_mode(monkeypatch):
    monkeypatch.setenv("MODE", "DEBUG")

    # modules hold a reference to the shared object, so switch it in place
    monkeypatch.setattr(settings_mod.settings, "mode", settings_mod.Modes.DEBUG)


@pytest.fixture(autouse=True)
def single_thread_torch():
    import torch

    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)
