"""Authentication, authorization, decision caching, and rate limiting.

Two authentication protocols are supported, selected by the server config:
``api_key`` (opaque 256-bit keys held in the store, presented via the
``api_key`` header or a Bearer token) and ``jwt`` (compact RS256-signed
tokens validated against a configured public key, with roles carried in a
``roles`` claim). Decisions are cached by a digest of the presented
credential; a revocation done outside this service is therefore honored
within at most the cache TTL, while revocations through this service
invalidate the cache immediately.
"""

from __future__ import annotations

import base64
import hashlib
import json
import secrets
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding

from .errors import (
    ExpiredCredential,
    InvalidCredential,
    MissingCredential,
    NoSigningKey,
    NotFound,
    RevokedCredential,
)
from .model import Endpoint, RateLimitPolicy, ServerConfig
from .store import ApiKeyRecord, Store

CLOCK_SKEW_SECONDS = 60
AUTH_CACHE_MAX_ENTRIES = 10_000
FINGERPRINT_CHARS = 16


@dataclass(frozen=True)
class Principal:
    subject: str
    roles: frozenset[str] = frozenset()
    source: str = "anonymous"
    expires_at: float = float("inf")


ANONYMOUS = Principal(subject="anonymous", source="anonymous")


@dataclass(frozen=True)
class JwtClaims:
    iss: str
    sub: str
    aud: str
    exp: float
    iat: float
    roles: tuple[str, ...] = ()


def credential_hash(credential: str) -> str:
    return hashlib.sha256(credential.encode("utf-8")).hexdigest()


def fingerprint(credential: str) -> str:
    """Short non-reversible identifier safe for listings and logs."""
    return credential_hash(credential)[:FINGERPRINT_CHARS]


# --- compact JWS (RS256) -------------------------------------------------------

def _b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _b64url_decode(text: str) -> bytes:
    padding_needed = -len(text) % 4
    try:
        return base64.urlsafe_b64decode(text + "=" * padding_needed)
    except Exception as exc:
        raise InvalidCredential(f"bad token encoding: {exc}") from exc


def jwt_encode(claims: dict, private_key) -> str:
    header = {"alg": "RS256", "typ": "JWT"}
    signing_input = (
        _b64url(json.dumps(header, separators=(",", ":")).encode())
        + "."
        + _b64url(json.dumps(claims, separators=(",", ":")).encode())
    ).encode("ascii")
    signature = private_key.sign(signing_input, padding.PKCS1v15(), hashes.SHA256())
    return signing_input.decode("ascii") + "." + _b64url(signature)


def jwt_verify(token: str, public_key, now: float) -> JwtClaims:
    """Verify a compact RS256 JWS and validate its time claims."""
    parts = token.split(".")
    if len(parts) != 3:
        raise InvalidCredential("token is not a compact JWS")
    header_b64, payload_b64, signature_b64 = parts
    try:
        header = json.loads(_b64url_decode(header_b64))
    except (ValueError, UnicodeDecodeError) as exc:
        raise InvalidCredential("unreadable token header") from exc
    if header.get("alg") != "RS256":
        raise InvalidCredential(f"unsupported alg: {header.get('alg')!r}")
    signing_input = (header_b64 + "." + payload_b64).encode("ascii")
    try:
        public_key.verify(
            _b64url_decode(signature_b64),
            signing_input,
            padding.PKCS1v15(),
            hashes.SHA256(),
        )
    except InvalidSignature as exc:
        raise InvalidCredential("signature verification failed") from exc
    try:
        payload = json.loads(_b64url_decode(payload_b64))
    except (ValueError, UnicodeDecodeError) as exc:
        raise InvalidCredential("unreadable token payload") from exc
    if "exp" not in payload or "sub" not in payload:
        raise InvalidCredential("token missing exp or sub claim")
    exp = float(payload["exp"])
    iat = float(payload.get("iat", 0))
    if now > exp + CLOCK_SKEW_SECONDS:
        raise ExpiredCredential("token expired")
    if iat and iat - CLOCK_SKEW_SECONDS > now:
        raise InvalidCredential("token issued in the future")
    roles = payload.get("roles", [])
    if not isinstance(roles, list):
        raise InvalidCredential("roles claim must be a list")
    return JwtClaims(
        iss=str(payload.get("iss", "")),
        sub=str(payload["sub"]),
        aud=str(payload.get("aud", "")),
        exp=exp,
        iat=iat,
        roles=tuple(str(r) for r in roles),
    )


def load_private_key(pem: bytes):
    return serialization.load_pem_private_key(pem, password=None)


def load_public_key(pem: bytes):
    return serialization.load_pem_public_key(pem)


# --- decision cache --------------------------------------------------------------

class AuthCache:
    """Bounded LRU of positive authentication decisions keyed by credential digest."""

    def __init__(self, max_entries: int = AUTH_CACHE_MAX_ENTRIES):
        self._entries: OrderedDict[str, tuple[Principal, float]] = OrderedDict()
        self._max = max_entries
        self._lock = threading.Lock()

    def get(self, digest: str, now: float, ttl: float) -> Principal | None:
        with self._lock:
            entry = self._entries.get(digest)
            if entry is None:
                return None
            principal, cached_at = entry
            if now - cached_at >= ttl:
                del self._entries[digest]
                return None
            self._entries.move_to_end(digest)
            return principal

    def put(self, digest: str, principal: Principal, now: float) -> None:
        with self._lock:
            self._entries[digest] = (principal, now)
            self._entries.move_to_end(digest)
            while len(self._entries) > self._max:
                self._entries.popitem(last=False)

    def invalidate_digest(self, digest: str) -> None:
        with self._lock:
            self._entries.pop(digest, None)

    def invalidate_subject(self, subject: str) -> None:
        with self._lock:
            stale = [k for k, (p, _) in self._entries.items() if p.subject == subject]
            for k in stale:
                del self._entries[k]

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


# --- rate limiting -----------------------------------------------------------------

class RateLimiter:
    """Sliding-window counter with atomic check-and-increment per scope key."""

    def __init__(self) -> None:
        self._windows: dict[str, deque[float]] = {}
        self._lock = threading.Lock()

    def _scope(self, principal: Principal, policy: RateLimitPolicy) -> tuple[str, int]:
        if policy.scope == "perPrincipal":
            return f"subject:{principal.subject}", policy.requests_per_window
        # perRole: count against the principal's most permissive role
        best_role, best_limit = None, policy.requests_per_window
        for role in sorted(principal.roles):
            limit = policy.per_role_overrides.get(role, policy.requests_per_window)
            if best_role is None or limit > best_limit:
                best_role, best_limit = role, limit
        if best_role is None:
            return f"subject:{principal.subject}", policy.requests_per_window
        return f"role:{best_role}", best_limit

    def check(
        self, principal: Principal, policy: RateLimitPolicy | None, now: float
    ) -> tuple[bool, float]:
        """Returns (allowed, retry_after_seconds)."""
        if policy is None:
            return True, 0.0
        key, limit = self._scope(principal, policy)
        window = float(policy.window_seconds)
        with self._lock:
            timestamps = self._windows.setdefault(key, deque())
            while timestamps and timestamps[0] <= now - window:
                timestamps.popleft()
            if len(timestamps) >= limit:
                return False, max(window - (now - timestamps[0]), 0.0)
            timestamps.append(now)
            return True, 0.0


# --- authorization -------------------------------------------------------------------

def authorize(
    principal: Principal, endpoint: Endpoint, config: ServerConfig
) -> tuple[bool, str]:
    """Role gate for one endpoint; attribute filtering is a query-modifier concern."""
    if not config.enable_authorization:
        return True, ""
    rule = endpoint.visibility
    if rule is None or not rule.allowed_roles:
        return True, ""
    if rule.allowed_roles & principal.roles:
        return True, ""
    return False, (
        f"endpoint {endpoint.name!r} requires one of roles "
        f"{sorted(rule.allowed_roles)}"
    )


# --- the service ------------------------------------------------------------------------

class SecurityService:
    """Authentication and token issuance against one store and config."""

    def __init__(
        self,
        config: ServerConfig,
        store: Store,
        clock=time.time,
        private_key_pem: bytes | None = None,
        public_key_pem: bytes | None = None,
    ):
        self.config = config
        self.store = store
        self.clock = clock
        self.cache = AuthCache()
        self.rate_limiter = RateLimiter()
        self._private_key = None
        self._public_key = None
        if private_key_pem is None and config.jwt_private_key_path:
            private_key_pem = open(config.jwt_private_key_path, "rb").read()
        if public_key_pem is None and config.jwt_public_key_path:
            public_key_pem = open(config.jwt_public_key_path, "rb").read()
        if private_key_pem:
            self._private_key = load_private_key(private_key_pem)
            if public_key_pem is None:
                self._public_key = self._private_key.public_key()
        if public_key_pem:
            self._public_key = load_public_key(public_key_pem)

    # -- credential extraction --

    @staticmethod
    def _extract_credential(headers: dict[str, str]) -> str | None:
        lowered = {k.lower(): v for k, v in headers.items()}
        if "api_key" in lowered:
            return lowered["api_key"].strip()
        auth = lowered.get("authorization", "")
        if auth.lower().startswith("bearer "):
            return auth[7:].strip()
        return None

    # -- authentication --

    def authenticate(self, headers: dict[str, str], now: float | None = None) -> Principal:
        if not self.config.enable_authentication:
            return ANONYMOUS
        now = self.clock() if now is None else now
        credential = self._extract_credential(headers)
        if not credential:
            raise MissingCredential("no api_key or Authorization header")

        digest = credential_hash(credential)
        cached = self.cache.get(digest, now, self.config.auth_cache_ttl_seconds)
        if cached is not None:
            if now >= cached.expires_at:
                self.cache.invalidate_digest(digest)
                raise ExpiredCredential("credential expired")
            return cached

        if self.config.authentication_protocol == "api_key":
            principal = self._authenticate_api_key(credential, digest, now)
        else:
            principal = self._authenticate_jwt(credential, now)
        self.cache.put(digest, principal, now)
        return principal

    def _authenticate_api_key(self, credential: str, digest: str, now: float) -> Principal:
        try:
            record = self.store.get_api_key_by_hash(digest)
        except NotFound:
            raise InvalidCredential("unknown api key") from None
        if record.revoked:
            raise RevokedCredential("api key revoked")
        if now >= record.expires_at:
            raise ExpiredCredential("api key expired")
        try:
            user = self.store.get_user(record.subject)
        except NotFound:
            raise InvalidCredential(f"no user record for {record.subject!r}") from None
        if not user.active:
            raise InvalidCredential(f"user {record.subject!r} is deactivated")
        return Principal(
            subject=record.subject,
            roles=record.roles | user.roles,
            source="apiKey",
            expires_at=record.expires_at,
        )

    def _authenticate_jwt(self, credential: str, now: float) -> Principal:
        if self._public_key is None:
            raise InvalidCredential("no JWT public key configured")
        claims = jwt_verify(credential, self._public_key, now)
        return Principal(
            subject=claims.sub,
            roles=frozenset(claims.roles),
            source="jwt",
            expires_at=claims.exp + CLOCK_SKEW_SECONDS,
        )

    # -- issuance --

    def issue_api_key(
        self, subject: str, roles, ttl_seconds: int, now: float | None = None
    ) -> tuple[str, ApiKeyRecord]:
        """Mint a new key; the full key is returned exactly once."""
        now = self.clock() if now is None else now
        key = secrets.token_urlsafe(32)  # 256 bits
        record = ApiKeyRecord(
            fingerprint=fingerprint(key),
            key_hash=credential_hash(key),
            subject=subject,
            roles=frozenset(roles),
            issued_at=now,
            expires_at=now + ttl_seconds,
        )
        try:
            self.store.get_user(subject)
        except NotFound:
            self.store.put_user(subject, roles=frozenset(roles))
        self.store.put_api_key(record)
        return key, record

    def issue_jwt(
        self, subject: str, roles, ttl_seconds: int, now: float | None = None
    ) -> str:
        if self._private_key is None:
            raise NoSigningKey("no JWT private key configured")
        now = self.clock() if now is None else now
        claims = {
            "iss": self.config.instance_name,
            "sub": subject,
            "aud": "data-services",
            "iat": int(now),
            "exp": int(now + ttl_seconds),
            "roles": sorted(roles),
        }
        return jwt_encode(claims, self._private_key)

    # -- revocation (cache-coherent paths) --

    def revoke_api_key(self, fp: str) -> None:
        for record in self.store.list_api_keys():
            if record.fingerprint == fp:
                self.store.revoke_api_key(fp)
                self.cache.invalidate_digest(record.key_hash)
                return
        raise NotFound(f"unknown key fingerprint: {fp}")

    def set_user_active(self, subject: str, active: bool) -> None:
        self.store.set_active(subject, active)
        if not active:
            self.cache.invalidate_subject(subject)

    # -- rate limiting --

    def check_rate_limit(
        self, principal: Principal, now: float | None = None
    ) -> tuple[bool, float]:
        now = self.clock() if now is None else now
        return self.rate_limiter.check(principal, self.config.rate_limit, now)
