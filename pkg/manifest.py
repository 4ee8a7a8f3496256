"""
运行清单 - 记录命令、配置摘要、随机种子、时间戳与依赖版本
"""
import hashlib
import json
import logging
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

logger = logging.getLogger(__name__)

VERSION = '1.0.0'


def config_digest(data):
    """
    配置摘要：字节串直接取sha256；其他对象先按键排序序列化为JSON

    Args:
        data: bytes / str / 可JSON序列化对象

    Returns:
        'sha256:<hex>'
    """
    if isinstance(data, str):
        data = data.encode('utf-8')
    elif not isinstance(data, (bytes, bytearray)):
        data = json.dumps(data, sort_keys=True, separators=(',', ':'), default=str).encode('utf-8')
    return 'sha256:' + hashlib.sha256(data).hexdigest()


def _utc_now():
    return datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')


def package_versions():
    """主要依赖的版本号"""
    import joblib
    import numpy
    import pandas
    import scipy

    return {
        'factor-bc': VERSION,
        'python': platform.python_version(),
        'numpy': numpy.__version__,
        'scipy': scipy.__version__,
        'pandas': pandas.__version__,
        'joblib': joblib.__version__,
    }


@dataclass
class RunManifest:
    """单次运行的清单，时间戳只出现在这里"""

    command: str
    config_digest: str
    seed: object = None
    started_at: str = field(default_factory=_utc_now)
    finished_at: str = None
    versions: dict = field(default_factory=package_versions)
    version: str = f'factor-bc {VERSION}'
    extra: dict = field(default_factory=dict)

    def finish(self, **extra):
        self.finished_at = _utc_now()
        self.extra.update(extra)
        return self

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        """写入JSON文件"""
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True, default=str)
        logger.info(f"运行清单已保存: {path}")
        return path
