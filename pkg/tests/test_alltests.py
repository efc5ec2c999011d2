# Collection shim: the suite lives in-source as selftest tests, driven by
# src/alltests.py. This runs it as-is so pytest reports its outcome.
import pathlib
import subprocess
import sys


def test_alltests():
    script = pathlib.Path(__file__).parent.parent / 'src' / 'alltests.py'
    result = subprocess.run([sys.executable, str(script)], cwd=script.parent.parent)
    assert result.returncode == 0
