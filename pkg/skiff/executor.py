"""
Minimal built-in command executor for simulated container processes.

Verbs: echo-env NAME..., write PATH CONTENT..., read PATH, copy SRC DST, exit CODE, barrier.
`sh -c "a; b"` (or -lc) runs a statement list; the status of the last statement is returned.

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import shlex
import fnmatch
import posixpath

import logging
log = logging.getLogger(__name__)


NOT_FOUND = 127


class _Exit(Exception):
    def __init__(self, code):
        self.code = code


def split_statements(script):
    """'a x; b "y; z"' -> [['a', 'x'], ['b', 'y; z']]"""
    lexer = shlex.shlex(script, posix=True, punctuation_chars=';')
    lexer.whitespace_split = True
    statements, current = [], []
    for token in lexer:
        if token and set(token) == {';'}:
            if current:
                statements.append(current)
            current = []
        else:
            current.append(token)
    if current:
        statements.append(current)
    return statements


class Executor(object):
    """Runs commands against a mount view with a fixed environment, collecting stdout/stderr lines"""

    def __init__(self, view, env, barrier=None, name='container'):
        self.view = view
        self.env = dict(env)
        self.barrier = barrier
        self.name = name
        self.stdout = []
        self.stderr = []

    def __repr__(self):
        return '%s(%s)' % (self.__class__.__name__, self.name)

    def run(self, argv, prelude=None):
        """Run `argv` (after the optional entrypoint `prelude`) and return its exit status"""
        try:
            if prelude:
                code = self._command(list(prelude))
                if code != 0:
                    return code
            return self._command(list(argv)) if argv else 0
        except _Exit as e:
            return e.code

    def _command(self, argv):
        if argv[0] == 'sh' and len(argv) >= 3 and argv[1] in ('-c', '-lc'):
            code = 0
            for statement in split_statements(argv[2]):
                code = self._command(statement)
            return code
        verb = getattr(self, '_verb_' + argv[0].replace('-', '_'), None)
        if verb is None:
            self.stderr.append('%s: command not found' % argv[0])
            return NOT_FOUND
        try:
            return verb(*argv[1:])
        except (TypeError, ValueError):
            self.stderr.append('%s: bad arguments %s' % (argv[0], argv[1:]))
            return 2
        except OSError as e:
            self.stderr.append('%s: %s' % (argv[0], e))
            return 1

    def _verb_echo_env(self, *names):
        for name in names:
            self.stdout.append(self.env.get(name, ''))
        return 0

    def _verb_write(self, path, *content):
        self.view.write(path, ' '.join(content).encode('utf-8'))
        return 0

    def _verb_read(self, path):
        self.stdout.append(self.view.read(path).decode('utf-8', errors='replace'))
        return 0

    def _verb_copy(self, src, dst):
        parent, pattern = posixpath.split(src)
        if any(c in pattern for c in '*?['):
            sources = [posixpath.join(parent, n) for n in fnmatch.filter(self.view.listdir(parent), pattern)]
        else:
            sources = [src]
        if not sources:
            self.stderr.append('copy: no match for %s' % src)
            return 1
        to_dir = dst.endswith('/') or len(sources) > 1 or (self.view.exists(dst) and self.view.stat(dst).kind == 'dir')
        for s in sources:
            target = posixpath.join(dst, posixpath.basename(s)) if to_dir else dst
            self.view.write(target, self.view.read(s))
        return 0

    def _verb_exit(self, code='0'):
        raise _Exit(int(code))

    def _verb_barrier(self):
        if self.barrier is not None:
            self.barrier()
        return 0
