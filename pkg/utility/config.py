from typing import Optional

from utility.file import DictFile


class BaseConfig(dict):
    def __init__(self, config_type: str, name: Optional[str] = None, file_path: Optional[str] = None) -> None:
        super().__init__()
        if file_path is not None:
            self.dictFile: DictFile = DictFile(config_type, file_path=file_path)
        else:
            self.dictFile = DictFile(config_type, 'configs') if name is None else DictFile(
                name + '_' + config_type, 'configs')

        self.dictFile.read_data(self)

    def set_defaults(self) -> None:
        pass

    def store(self, file_path: Optional[str] = None) -> None:
        """Writes the config to its source file, or to `file_path` when given."""
        target = self.dictFile if file_path is None else DictFile(self.dictFile.name, file_path=file_path)
        target.write_data(self)
