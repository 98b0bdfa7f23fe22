import pytest

from skiff.storage import MemoryBackend
from skiff.imagestore import Bind, build_image, mount_view
from skiff.executor import NOT_FOUND, Executor, split_statements


@pytest.fixture
def view(publish):
    img = publish(build_image('tools:1', {'/etc/motd': b'welcome', '/srv/a.json': b'{}', '/srv/b.json': b'[]'}))
    return mount_view(img, MemoryBackend(), (1000, 1000), binds=[Bind('/out', MemoryBackend())])


def test_split_statements():
    assert split_statements('a x; b "y; z";;c') == [['a', 'x'], ['b', 'y; z'], ['c']]
    assert split_statements('') == []


def test_echo_env_and_read(view):
    ex = Executor(view, {'GREETING': 'hello'})
    assert ex.run(['echo-env', 'GREETING', 'UNSET']) == 0
    assert ex.run(['read', '/etc/motd']) == 0
    assert ex.stdout == ['hello', '', 'welcome']


def test_shell_statement_list(view):
    ex = Executor(view, {})
    assert ex.run(['sh', '-c', 'write /tmp/x "one two"; read /tmp/x']) == 0
    assert ex.stdout == ['one two']
    assert ex.run(['sh', '-lc', 'exit 3; write /tmp/never x']) == 3
    assert not view.exists('/tmp/never')


def test_errors_become_exit_codes(view):
    ex = Executor(view, {})
    assert ex.run(['python', 'train.py']) == NOT_FOUND
    assert ex.run(['read']) == 2
    assert ex.run(['read', '/missing']) == 1
    assert len(ex.stderr) == 3
    assert 'command not found' in ex.stderr[0]


def test_copy(view):
    ex = Executor(view, {})
    assert ex.run(['copy', '/srv/*.json', '/out/']) == 0
    assert view.listdir('/out') == ['a.json', 'b.json']
    assert ex.run(['copy', '/etc/motd', '/tmp/motd.bak']) == 0
    assert view.read('/tmp/motd.bak') == b'welcome'
    assert ex.run(['copy', '/srv/*.csv', '/out/']) == 1


def test_prelude_runs_first(view):
    ex = Executor(view, {'BANNER': 'entry'})
    assert ex.run(['read', '/etc/motd'], prelude=['echo-env', 'BANNER']) == 0
    assert ex.stdout == ['entry', 'welcome']
    ex = Executor(view, {})
    assert ex.run(['echo-env', 'X'], prelude=['exit', '5']) == 5
    assert ex.stdout == []


def test_barrier_callback(view):
    calls = []
    ex = Executor(view, {}, barrier=lambda: calls.append(1))
    assert ex.run(['sh', '-c', 'barrier; barrier']) == 0
    assert calls == [1, 1]
    assert Executor(view, {}).run(['barrier']) == 0


def test_empty_command(view):
    assert Executor(view, {}).run([]) == 0


@pytest.mark.parametrize('statement', ['exit abc', 'exit 1.5'])
def test_exit_with_non_numeric_code(view, statement):
    ex = Executor(view, {})
    assert ex.run(['sh', '-c', statement]) == 2
    assert ex.stderr[-1].startswith('exit: bad arguments')
