from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Tuple, Union

from interface.base_scene_generator import SceneRecord


class BaseDatastore(ABC):
    @abstractmethod
    def write_dataset(self, records: List[SceneRecord], path: Union[str, Path], digest: str) -> None:
        pass

    @abstractmethod
    def read_dataset(self, path: Union[str, Path]) -> Tuple[str, List[SceneRecord]]:
        pass

    @abstractmethod
    def export_annotations(self, records: List[SceneRecord], path: Union[str, Path]) -> None:
        pass
