"""
Skiff utils for interacting with the local OS outside of our own stores

---------------
Skiff HPC container launcher
Copyright (C) 2026 The Skiff Developers, all rights reserved.
You may use, distribute, and modify this code under the terms of the MIT License.
"""

import os
import pwd

import logging
log = logging.getLogger(__name__)


def current_identity():
    """(user name, uid, gid) of the invoking user"""
    uid, gid = os.getuid(), os.getgid()
    try:
        name = pwd.getpwuid(uid).pw_name
    except KeyError:
        name = os.environ.get('USER', str(uid))  # uid without a passwd entry
    return name, uid, gid


def make_private_dir(path, mode=0o700):
    """Create `path` (and parents) readable only by the current user; tightens an existing dir"""
    path = os.path.expanduser(path)
    os.makedirs(path, mode=mode, exist_ok=True)
    os.chmod(path, mode)
    log.debug('Private directory %s (%o)', path, mode)
    return path
