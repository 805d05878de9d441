from . import pool

Pool = pool.Pool
