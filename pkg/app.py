"""
Read-only HTTP API over the run store written by ``main.py --db``.

Endpoints:
  GET /api/sessions                    all sessions, newest first (cached)
  GET /api/sessions/{id}               one session with its summary and runs
  GET /api/sessions/{id}/runs?limit=   runs of a session
  GET /api/logs?limit=                 audit log entries

The session list is cached for a few seconds in Redis when REDIS_URL is set,
with an in-process cache as fallback when Redis is missing or failing.
"""

import json
import os
import sqlite3
import time as _time
from contextlib import asynccontextmanager
from typing import Any, Optional

from fastapi import FastAPI
from fastapi.responses import JSONResponse
from loguru import logger

import main as store

try:
    import redis.asyncio as _redis_async
    REDIS_ASYNC_AVAILABLE = True
except Exception:
    _redis_async = None
    REDIS_ASYNC_AVAILABLE = False

try:
    import redis as _redis_sync
    REDIS_SYNC_AVAILABLE = True
except Exception:
    _redis_sync = None
    REDIS_SYNC_AVAILABLE = False

REDIS_CLIENT = None
REDIS_ASYNC_CLIENT = None
REDIS_URL = os.environ.get('REDIS_URL')
if REDIS_URL:
    if REDIS_ASYNC_AVAILABLE:
        try:
            REDIS_ASYNC_CLIENT = _redis_async.from_url(REDIS_URL, decode_responses=True)
        except Exception:
            REDIS_ASYNC_CLIENT = None
    if REDIS_SYNC_AVAILABLE:
        try:
            REDIS_CLIENT = _redis_sync.from_url(REDIS_URL, decode_responses=True)
        except Exception:
            REDIS_CLIENT = None

SESSIONS_CACHE_KEY = 'rv32c:sessions'
SESSIONS_CACHE_TTL = 5
_SESSIONS_CACHE = {'ts': 0.0, 'ttl': float(SESSIONS_CACHE_TTL), 'sessions': []}


@asynccontextmanager
async def lifespan(app: FastAPI):
    store.init_db()
    logger.info('report API using store {}', store.DB_PATH)
    yield


app = FastAPI(lifespan=lifespan)


def get_redis_client():
    """Return the global REDIS_CLIENT if configured, else None."""
    return REDIS_CLIENT


def serialize_json(obj: Any) -> str:
    try:
        return json.dumps(obj)
    except (TypeError, ValueError):
        return '{}'


def deserialize_json(s: Optional[str]) -> Any:
    if s is None:
        return None
    try:
        return json.loads(s)
    except (TypeError, ValueError):
        return None


def _connect() -> sqlite3.Connection:
    conn = sqlite3.connect(store.DB_PATH)
    conn.row_factory = sqlite3.Row
    return conn


def _session_row(row: sqlite3.Row) -> dict:
    out = dict(row)
    out['summary'] = deserialize_json(out.get('summary'))
    return out


def _run_row(row: sqlite3.Row) -> dict:
    out = dict(row)
    out['inputs'] = deserialize_json(out.get('inputs')) or {}
    return out


def _fresh(payload: Any, now: float, ttl: float) -> bool:
    return isinstance(payload, dict) and payload.get('ts') and now - payload.get('ts', 0) < ttl


async def _cache_get(now: float):
    try:
        if REDIS_ASYNC_CLIENT is not None:
            parsed = deserialize_json(await REDIS_ASYNC_CLIENT.get(SESSIONS_CACHE_KEY))
        else:
            rc = get_redis_client()
            parsed = deserialize_json(rc.get(SESSIONS_CACHE_KEY)) if rc else None
        if _fresh(parsed, now, SESSIONS_CACHE_TTL):
            return parsed.get('sessions', [])
    except Exception as e:
        # Redis problems are not fatal; fall through to the in-process cache
        logger.debug('redis get failed: {}', e)
    cache = globals().get('_SESSIONS_CACHE')
    if cache and _fresh(cache, now, cache.get('ttl', SESSIONS_CACHE_TTL)):
        return cache.get('sessions', [])
    return None


async def _cache_put(now: float, sessions: list):
    globals()['_SESSIONS_CACHE'] = {'ts': now, 'ttl': float(SESSIONS_CACHE_TTL), 'sessions': sessions}
    payload = serialize_json({'ts': now, 'sessions': sessions})
    try:
        if REDIS_ASYNC_CLIENT is not None:
            await REDIS_ASYNC_CLIENT.setex(SESSIONS_CACHE_KEY, SESSIONS_CACHE_TTL, payload)
        else:
            rc = get_redis_client()
            if rc:
                rc.setex(SESSIONS_CACHE_KEY, SESSIONS_CACHE_TTL, payload)
    except Exception as e:
        logger.debug('redis setex failed: {}', e)


@app.get('/api/sessions')
async def api_sessions():
    try:
        now = _time.time()
        cached = await _cache_get(now)
        if cached is not None:
            return JSONResponse({'ok': True, 'sessions': cached})
        conn = _connect()
        rows = conn.execute('SELECT * FROM sessions ORDER BY id DESC').fetchall()
        conn.close()
        sessions = [_session_row(r) for r in rows]
        await _cache_put(now, sessions)
        return JSONResponse({'ok': True, 'sessions': sessions})
    except Exception as e:
        return JSONResponse({'ok': False, 'reason': str(e)}, status_code=500)


@app.get('/api/sessions/{session_id}')
async def api_session(session_id: int):
    try:
        conn = _connect()
        row = conn.execute('SELECT * FROM sessions WHERE id = ?', (session_id,)).fetchone()
        if row is None:
            conn.close()
            return JSONResponse({'ok': False, 'reason': 'Session not found'}, status_code=404)
        runs = conn.execute('SELECT * FROM runs WHERE session_id = ? ORDER BY run_id ASC',
                            (session_id,)).fetchall()
        conn.close()
        return JSONResponse({'ok': True, 'session': _session_row(row), 'runs': [_run_row(r) for r in runs]})
    except Exception as e:
        return JSONResponse({'ok': False, 'reason': str(e)}, status_code=500)


@app.get('/api/sessions/{session_id}/runs')
async def api_session_runs(session_id: int, limit: int = 100):
    try:
        conn = _connect()
        exists = conn.execute('SELECT 1 FROM sessions WHERE id = ?', (session_id,)).fetchone()
        if exists is None:
            conn.close()
            return JSONResponse({'ok': False, 'reason': 'Session not found'}, status_code=404)
        rows = conn.execute('SELECT * FROM runs WHERE session_id = ? ORDER BY run_id ASC LIMIT ?',
                            (session_id, limit)).fetchall()
        conn.close()
        return JSONResponse({'ok': True, 'runs': [_run_row(r) for r in rows]})
    except Exception as e:
        return JSONResponse({'ok': False, 'reason': str(e)}, status_code=500)


@app.get('/api/logs')
async def api_logs(limit: int = 200):
    try:
        conn = _connect()
        rows = conn.execute('SELECT * FROM logs ORDER BY id DESC LIMIT ?', (limit,)).fetchall()
        conn.close()
        return JSONResponse({'ok': True, 'logs': [dict(r) for r in rows]})
    except Exception as e:
        return JSONResponse({'ok': False, 'reason': str(e)}, status_code=500)
