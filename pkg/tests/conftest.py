import sys

sys.path.insert(0, "tests")

from hypothesis import settings

settings.register_profile("ci", derandomize=True)
settings.load_profile("ci")
