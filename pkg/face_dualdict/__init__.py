"""双字典（通用 + 专属）人脸盲复原工具包"""

__all__ = []
