# Puts the repository root on sys.path so tests import app, util and contrib
