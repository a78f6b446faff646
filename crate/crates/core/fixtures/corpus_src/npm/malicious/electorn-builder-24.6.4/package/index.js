module.exports = function noop() {
  return null;
};
