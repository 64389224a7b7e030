import hashlib
import json
import os
import tempfile
from functools import reduce
from typing import Any, Dict, List

from definitions import BASE_PATH
from utility.ladmim_type_converter import (convert_values, ladmim_to_str,
                                           str_to_ladmim, to_json_value)
from utility.singleton import Singleton


def atomic_write_bytes(path: str, data: bytes) -> None:
    directory: str = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    file_descriptor, temp_path = tempfile.mkstemp(dir=directory, prefix='.tmp_', suffix=os.path.basename(path))
    try:
        with os.fdopen(file_descriptor, 'wb') as temp_file:
            temp_file.write(data)
            temp_file.flush()
            os.fsync(temp_file.fileno())
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


def dump_json(data: Any) -> str:
    return json.dumps(convert_values(data, to_json_value), sort_keys=True, indent=2) + '\n'


def write_json(path: str, data: Any) -> None:
    atomic_write_text(path, dump_json(data))


def read_json(path: str) -> Any:
    with open(path, 'r') as json_file:
        return json.load(json_file)


def file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as hashed_file:
        for chunk in iter(lambda: hashed_file.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


class RunStatistics(metaclass=Singleton):
    def __init__(self) -> None:
        self.stats_cache: Dict[str, List[float]] = dict()

    def append_statistics(self, data: Dict[str, float]) -> None:
        for name, stat in data.items():
            if name not in self.stats_cache.keys():
                self.stats_cache[name] = []
            self.stats_cache[name].append(stat)

    def summary(self) -> Dict[str, Dict[str, float]]:
        summary: Dict[str, Dict[str, float]] = dict()
        for name, stat in self.stats_cache.items():
            summary[name] = {'calls': len(stat),
                             'total_seconds': reduce(lambda a, b: a + b, stat),
                             'mean_seconds': reduce(lambda a, b: a + b, stat) / len(stat)}
        return summary

    def write_statistics(self, path: str) -> None:
        write_json(path, self.summary())


class DictFile:
    def __init__(self, name: str, sub_path: str = 'configs', file_path: str = None) -> None:
        if file_path is None:
            self.directory_path: str = os.path.join(BASE_PATH, sub_path)
            self.file_path: str = f'{self.directory_path}/{name}.json'
        else:
            self.directory_path = os.path.dirname(os.path.abspath(file_path))
            self.file_path = file_path
        self.name = name

    def read_data(self, data: Dict) -> Dict:
        read_data = dict()
        try:
            with open(self.file_path, 'r') as dict_file:
                file_data = dict_file.read()
                if file_data:
                    read_data = convert_values(
                        json.loads(file_data), str_to_ladmim)
        except FileNotFoundError:
            pass
        for key in read_data.keys():
            data[key] = read_data[key]
        return data

    def write_data(self, data: Dict) -> None:
        atomic_write_text(self.file_path, json.dumps(convert_values(data, ladmim_to_str), sort_keys=True, indent=2))
