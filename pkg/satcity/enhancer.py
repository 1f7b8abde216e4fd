import hashlib
import io
import logging
import os
import shlex
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import List, Optional

import numpy as np
import requests
from PIL import Image

from .errors import EnhancerError
from .raster import to_uint8

logger = logging.getLogger(__name__)

MODES = ("identity", "command", "http")


@dataclass
class EnhancerConfig:
    mode: str = "identity"
    command: Optional[List[str]] = None
    endpoint: Optional[str] = None
    timeout: float = 120.0
    concurrency: int = 1
    cache_dir: Optional[str] = None
    cache_ttl: float = 86400.0


class EnhancerHook:
    """
    Image-to-image enhancer applied to rendered views.

    Modes:
        identity: returns every image unchanged
        command: runs an external program per image; the command template
            is an argument list where "{input}" and "{output}" are replaced
            by PNG paths. A non-zero exit status, a timeout, a missing
            output or a size change is a failure.
        http: POSTs the PNG to an endpoint and reads a PNG back; responses
            are cached on disk keyed by the md5 of the request
    """

    def __init__(self, mode="identity", command=None, endpoint=None, timeout=120.0, concurrency=1,
                 cache_dir=None, cache_ttl=86400.0, api_key=None):
        """
        Initialize the enhancer.

        Args:
            mode: One of identity / command / http
            command: Argument list template (command mode)
            endpoint: URL receiving image/png POSTs (http mode)
            timeout: Per-image timeout in seconds
            concurrency: Maximum images in flight
            cache_dir: Response cache directory (http mode, optional)
            cache_ttl: Cache time-to-live in seconds
            api_key: Bearer token for the endpoint (defaults to SATCITY_ENHANCER_KEY)
        """
        if mode not in MODES:
            raise ValueError(f"unknown enhancer mode {mode!r}")
        if mode == "command" and not command:
            raise ValueError("command mode needs a command template")
        if mode == "http" and not endpoint:
            raise ValueError("http mode needs an endpoint")
        self.mode = mode
        self.command = [command] if isinstance(command, str) else command
        if self.command and len(self.command) == 1:
            self.command = shlex.split(self.command[0])
        self.endpoint = endpoint
        self.timeout = timeout
        self.concurrency = max(1, int(concurrency))
        self.cache_dir = cache_dir
        self.cache_ttl = cache_ttl
        self.api_key = api_key or os.environ.get("SATCITY_ENHANCER_KEY")

        if self.cache_dir and not os.path.exists(self.cache_dir):
            os.makedirs(self.cache_dir)

        logger.info(f"Enhancer initialized in {mode} mode")

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.mode, cfg.command, cfg.endpoint, cfg.timeout, cfg.concurrency, cfg.cache_dir, cfg.cache_ttl)

    def enhance(self, image, index=None):
        """
        Enhance one float RGB image in [0, 1].

        Args:
            image: (H, W, 3) array
            index: View index for error messages

        Returns:
            Enhanced (H, W, 3) float array of identical size
        """
        if self.mode == "identity":
            return image
        if self.mode == "command":
            out = self._run_command(image, index)
        else:
            out = self._post_image(image, index)
        if out.shape != image.shape:
            raise EnhancerError(f"enhancer returned {out.shape[1]}x{out.shape[0]}, "
                                f"expected {image.shape[1]}x{image.shape[0]}", index)
        return out

    def enhance_all(self, images):
        """
        Enhance a batch with bounded concurrency; results keep input order.

        Raises:
            EnhancerError for the first failing image (in input order)
        """
        if self.mode == "identity":
            return list(images)
        start = time.time()
        if self.concurrency == 1:
            results = [self.enhance(img, i) for i, img in enumerate(images)]
        else:
            with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
                futures = [pool.submit(self.enhance, img, i) for i, img in enumerate(images)]
                results = [f.result() for f in futures]
        logger.info(f"Enhanced {len(results)} views in {time.time() - start:.1f}s")
        return results

    def _run_command(self, image, index):
        with tempfile.TemporaryDirectory(prefix="satcity_enh_") as tmp:
            src = os.path.join(tmp, "input.png")
            dst = os.path.join(tmp, "output.png")
            Image.fromarray(to_uint8(image)).save(src)
            argv = [part.replace("{input}", src).replace("{output}", dst) for part in self.command]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired:
                raise EnhancerError(f"command timed out after {self.timeout}s", index)
            except OSError as e:
                raise EnhancerError(f"cannot run command: {e}", index)
            if proc.returncode != 0:
                raise EnhancerError(f"command exited with status {proc.returncode}: {proc.stderr.strip()}", index)
            if not os.path.exists(dst):
                raise EnhancerError("command produced no output image", index)
            with Image.open(dst) as im:
                return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0

    def _post_image(self, image, index):
        buf = io.BytesIO()
        Image.fromarray(to_uint8(image)).save(buf, format="PNG")
        payload = buf.getvalue()

        cached = self._get_from_cache(payload)
        if cached is not None:
            logger.debug("Returning enhanced view from cache")
            body = cached
        else:
            headers = {"Content-Type": "image/png", "Accept": "image/png"}
            if self.api_key:
                headers["Authorization"] = f"Bearer {self.api_key}"
            try:
                response = requests.post(self.endpoint, data=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as e:
                raise EnhancerError(f"request failed: {e}", index)
            if response.status_code != 200:
                raise EnhancerError(f"endpoint error {response.status_code}: {response.text[:200]}", index)
            body = response.content
            self._save_to_cache(payload, body)
        try:
            with Image.open(io.BytesIO(body)) as im:
                return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as e:
            raise EnhancerError(f"endpoint returned an unreadable image: {e}", index)

    def _get_cache_key(self, payload):
        return hashlib.md5(self.endpoint.encode() + b"\0" + payload).hexdigest()

    def _get_from_cache(self, payload):
        """
        Get a cached response if present and not expired.

        Returns:
            PNG bytes or None
        """
        if not self.cache_dir:
            return None
        cache_file = os.path.join(self.cache_dir, f"{self._get_cache_key(payload)}.png")
        if not os.path.exists(cache_file):
            return None
        age = datetime.now() - datetime.fromtimestamp(os.path.getmtime(cache_file))
        if age > timedelta(seconds=self.cache_ttl):
            logger.debug(f"Cache expired: {cache_file}")
            return None
        try:
            with open(cache_file, "rb") as f:
                return f.read()
        except OSError as e:
            logger.warning(f"Error reading from cache: {str(e)}")
            return None

    def _save_to_cache(self, payload, body):
        if not self.cache_dir:
            return
        cache_file = os.path.join(self.cache_dir, f"{self._get_cache_key(payload)}.png")
        try:
            with open(cache_file, "wb") as f:
                f.write(body)
        except OSError as e:
            logger.warning(f"Error saving to cache: {str(e)}")
